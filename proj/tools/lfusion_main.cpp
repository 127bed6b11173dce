#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lfusion/common.hpp"
#include "lfusion/pipeline.hpp"

namespace {

using namespace lfusion;

struct CommonOpts {
    std::string config_path;
    std::string seed;
    std::string jobs;
    std::string out;
    std::string data;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path,
                    "config file: `key = value` lines or a run.json snapshot");
    cmd->add_option("--seed", o.seed, "root seed (unsigned 64-bit)");
    cmd->add_option("--jobs", o.jobs, "worker threads");
    cmd->add_option("--out", o.out, "output directory (default: out)");
    cmd->add_option("--data", o.data, "dataset directory (default: data)");
    cmd->add_option("--set", o.sets, "extra KEY=VALUE config override (repeatable)");
}

// defaults < config file < environment < explicit flags
RunConfig resolve(const CommonOpts& o) {
    RunConfig cfg =
        o.config_path.empty() ? config_defaults() : config_parse_file(o.config_path);
    config_apply_env(cfg);
    for (const std::string& kv : o.sets) {
        std::size_t eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects KEY=VALUE, got: " + kv);
        config_set(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (!o.seed.empty()) config_set(cfg, "seed", o.seed);
    if (!o.jobs.empty()) config_set(cfg, "jobs", o.jobs);
    if (!o.out.empty()) config_set(cfg, "out_dir", o.out);
    if (!o.data.empty()) config_set(cfg, "data_dir", o.data);
    config_validate(cfg);
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "lfusion: probabilistic ultrasound-phantom segmentation with fused "
        "epistemic/aleatoric uncertainty and out-of-distribution scoring"};
    app.require_subcommand(1);

    std::function<void()> action;

    struct Verb {
        const char* name;
        const char* help;
        void (*fn)(const RunConfig&);
    };
    const std::vector<Verb> verbs = {
        {"synth", "generate the phantom dataset splits", cmd_synth},
        {"pretrain-encoder", "train the shared encoder and freeze it",
         cmd_pretrain_encoder},
        {"train-head", "train the preset's uncertainty head(s)", cmd_train_head},
        {"fit-laplace", "fit the Gaussian posterior over the head parameters",
         cmd_fit_laplace},
        {"calibrate", "pick the best OOD measure on validation", cmd_calibrate},
        {"eval-seg", "segmentation metrics on the in-distribution test split",
         cmd_eval_seg},
        {"eval-ood", "OOD detection AUC table on the test splits", cmd_eval_ood},
        {"bench", "wall-clock throughput report", cmd_bench},
    };
    std::vector<std::unique_ptr<CommonOpts>> opt_storage;
    for (const Verb& verb : verbs) {
        CLI::App* cmd = app.add_subcommand(verb.name, verb.help);
        opt_storage.push_back(std::make_unique<CommonOpts>());
        CommonOpts* o = opt_storage.back().get();
        add_common(cmd, *o);
        void (*fn)(const RunConfig&) = verb.fn;
        cmd->callback([&action, o, fn] { action = [o, fn] { fn(resolve(*o)); }; });
    }

    CLI::App* infer = app.add_subcommand(
        "infer", "segment one image and dump uncertainty maps");
    opt_storage.push_back(std::make_unique<CommonOpts>());
    CommonOpts* infer_opts = opt_storage.back().get();
    add_common(infer, *infer_opts);
    auto image_path = std::make_shared<std::string>();
    auto mask_path = std::make_shared<std::string>();
    infer->add_option("--image", *image_path, "input image tensor (LFT1)")->required();
    infer->add_option("--mask", *mask_path,
                      "optional ground-truth mask tensor for a Dice readout");
    infer->callback([&action, infer_opts, image_path, mask_path] {
        action = [infer_opts, image_path, mask_path] {
            cmd_infer(resolve(*infer_opts), *image_path, *mask_path);
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        action();
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
