#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lfusion/autonet.hpp"
#include "lfusion/common.hpp"
#include "lfusion/laplace.hpp"
#include "lfusion/pipeline.hpp"
#include "lfusion/ssn.hpp"
#include "lfusion/synthdata.hpp"
#include "lfusion/tensor.hpp"

using namespace lfusion;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path test_root() {
    static fs::path root = [] {
        fs::path p = fs::temp_directory_path() / "lfusion_pipeline_test";
        fs::remove_all(p);
        fs::create_directories(p);
        return p;
    }();
    return root;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string first_line(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(bool(in));
    std::string line;
    std::getline(in, line);
    return line;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

// Tiny but complete lfusion run shared by the artifact tests below.
struct Fixture {
    RunConfig cfg;
};

RunConfig tiny_config(const std::string& preset, const std::string& out_name) {
    RunConfig cfg = config_defaults();
    cfg.preset = preset;
    cfg.image_size = 64;
    cfg.n_train = 6;
    cfg.n_val = 3;
    cfg.n_test = 3;
    cfg.encoder_epochs = 3;
    cfg.head_epochs = 3;
    cfg.m = 6;
    cfg.n_inner = 2;
    cfg.rank = 3;
    cfg.fisher_rank = 3;
    cfg.t_inner = 2;
    cfg.patience = 5;
    cfg.lambda_grid = {1.0, 10.0};
    cfg.seed = 5;
    cfg.data_dir = (test_root() / "data").string();
    cfg.out_dir = (test_root() / out_name).string();
    return cfg;
}

const Fixture& fixture() {
    static Fixture fx = [] {
        Fixture f;
        f.cfg = tiny_config("lfusion", "out_lfusion");
        cmd_synth(f.cfg);
        cmd_pretrain_encoder(f.cfg);
        cmd_train_head(f.cfg);
        cmd_fit_laplace(f.cfg);
        cmd_calibrate(f.cfg);
        return f;
    }();
    return fx;
}

std::string first_image_of(const RunConfig& cfg, const std::string& split) {
    return (fs::path(cfg.data_dir) / split / "s0000_image.lft").string();
}

}  // namespace

TEST_CASE("config keys, overrides, and validation") {
    RunConfig cfg = config_defaults();
    config_validate(cfg);

    config_set(cfg, "m", "12");
    CHECK(cfg.m == 12);
    config_set(cfg, "lambda_grid", "0.5, 2");
    REQUIRE(cfg.lambda_grid.size() == 2);
    CHECK(cfg.lambda_grid[1] == doctest::Approx(2.0));
    CHECK_THROWS_AS(config_set(cfg, "bogus", "1"), ConfigError);
    CHECK_THROWS_AS(config_set(cfg, "m", "many"), ConfigError);

    auto reject = [](const char* key, const char* value) {
        RunConfig c = config_defaults();
        config_set(c, key, value);
        CHECK_THROWS_AS(config_validate(c), ConfigError);
    };
    reject("image_size", "60");   // not a multiple of 8... and below the floor
    reject("image_size", "32");   // multiple of 8 but too small
    reject("classes", "3");       // only binary heads are wired up
    reject("m", "1");
    reject("dropout", "1.0");
    reject("clip_frames", "1");
    reject("clip_frames", "16");  // clips need the dropout_unet preset
    reject("score_reduction", "max");
    reject("score_q", "0");
    reject("preset", "resnet");

    RunConfig clip = config_defaults();
    config_set(clip, "preset", "dropout_unet");
    config_set(clip, "clip_frames", "16");
    config_validate(clip);  // the one sanctioned clip combination
}

TEST_CASE("config file, environment, and run.json round trip") {
    fs::path dir = test_root() / "config_io";
    fs::create_directories(dir);
    std::string cfg_path = (dir / "run.cfg").string();
    {
        std::ofstream os(cfg_path);
        os << "# comment line\n"
           << "preset = ssn\n"
           << "m = 8   # trailing comment\n"
           << "\n"
           << "lambda_grid = 0.5, 5\n";
    }
    RunConfig cfg = config_parse_file(cfg_path);
    CHECK(cfg.preset == "ssn");
    CHECK(cfg.m == 8);
    REQUIRE(cfg.lambda_grid.size() == 2);
    CHECK(!config_path_is_json(cfg_path));

    {
        std::ofstream os(dir / "bad.cfg");
        os << "m = 8\nwhatever = 1\n";
    }
    CHECK_THROWS_WITH_AS(config_parse_file((dir / "bad.cfg").string()),
                         doctest::Contains("bad.cfg:2"), ConfigError);

    setenv("LFUSION_N_INNER", "7", 1);
    config_apply_env(cfg);
    unsetenv("LFUSION_N_INNER");
    CHECK(cfg.n_inner == 7);

    std::string snap = (dir / "run.json").string();
    run_json_write(cfg, "synth", snap);
    CHECK(config_path_is_json(snap));
    RunConfig back = run_json_read(snap);
    CHECK(back.preset == cfg.preset);
    CHECK(back.m == cfg.m);
    CHECK(back.n_inner == 7);
    CHECK(back.lambda_grid == cfg.lambda_grid);
    CHECK(back.seed == cfg.seed);
    // config_parse_file accepts the snapshot transparently
    RunConfig again = config_parse_file(snap);
    CHECK(again.n_inner == 7);
}

TEST_CASE("synthetic dataset layout, reproducibility, and phantom kinds") {
    const RunConfig& cfg = fixture().cfg;
    SplitPaths sp = split_paths(cfg);
    for (const std::string& dir :
         {sp.train, sp.val_id, sp.val_ood, sp.test_id, sp.test_ood}) {
        CHECK(fs::exists(fs::path(dir) / "manifest.csv"));
        CHECK(fs::exists(fs::path(dir) / "checksums.txt"));
    }
    std::vector<SampleRecord> train = dataset_read(sp.train);
    CHECK(train.size() == static_cast<std::size_t>(cfg.n_train));
    CHECK(train[0].image.shape() ==
          std::vector<std::size_t>{1, cfg.image_size, cfg.image_size});
    CHECK(!train[0].is_ood);
    std::vector<SampleRecord> ood = dataset_read(sp.test_ood);
    CHECK(ood.size() == static_cast<std::size_t>(cfg.n_test));
    CHECK(ood[0].is_ood);

    // same seed, same bytes
    std::string sums = slurp((fs::path(sp.test_ood) / "checksums.txt").string());
    cmd_synth(cfg);
    CHECK(slurp((fs::path(sp.test_ood) / "checksums.txt").string()) == sums);

    // the deformed splits are actually deformed
    std::vector<SampleRecord> id = dataset_read(sp.test_id);
    double delta = 0.0;
    for (std::size_t i = 0; i < id[0].image.numel(); ++i)
        delta += std::fabs(id[0].image[i] - ood[0].image[i]);
    CHECK(delta > 0.0);

    // heart phantoms carry multi-structure labels
    RunConfig heart = tiny_config("lfusion", "out_heart");
    heart.kind = "heart";
    heart.data_dir = (test_root() / "data_heart").string();
    heart.n_train = 2;
    heart.n_val = 1;
    heart.n_test = 1;
    cmd_synth(heart);
    std::vector<SampleRecord> hh = dataset_read(split_paths(heart).train);
    float max_label = 0.0f;
    for (std::size_t i = 0; i < hh[0].mask.numel(); ++i)
        max_label = std::max(max_label, hh[0].mask[i]);
    CHECK(max_label >= 2.0f);

    // clip mode produces (1, T, H, W) images with per-frame masks
    RunConfig clip = tiny_config("dropout_unet", "out_clipsynth");
    clip.clip_frames = 2;
    clip.data_dir = (test_root() / "data_clip").string();
    clip.n_train = 1;
    clip.n_val = 1;
    clip.n_test = 1;
    cmd_synth(clip);
    std::vector<SampleRecord> cc = dataset_read(split_paths(clip).train);
    CHECK(cc[0].image.shape() ==
          std::vector<std::size_t>{1, 2, cfg.image_size, cfg.image_size});
    CHECK(cc[0].mask.shape() ==
          std::vector<std::size_t>{2, cfg.image_size, cfg.image_size});
}

TEST_CASE("unet split round trip and parameter hashing") {
    RunConfig cfg = tiny_config("lfusion", "out_unused");
    RngStream init = derive_stream(42, "unet-test", 0);
    Network full = build_unet(cfg, /*with_dropout=*/true, init);
    Network trunk, head;
    split_unet(full, trunk, head);
    CHECK(params_flatten(trunk).numel() + params_flatten(head).numel() ==
          params_flatten(full).numel());

    Tensor x = gen_head_phantom(7, cfg.image_size).image;
    Tensor direct = forward_eval(full, x);
    Tensor staged = forward_eval(head, forward_eval(trunk, x));
    REQUIRE(direct.shape() == staged.shape());
    for (std::size_t i = 0; i < direct.numel(); ++i)
        CHECK(direct[i] == doctest::Approx(staged[i]).epsilon(1e-6));

    RngStream init_b = derive_stream(42, "unet-test", 0);
    Network same = build_unet(cfg, true, init_b);
    CHECK(network_param_hash(same) == network_param_hash(full));
    RngStream init_c = derive_stream(43, "unet-test", 0);
    Network other = build_unet(cfg, true, init_c);
    CHECK(network_param_hash(other) != network_param_hash(full));
}

TEST_CASE("pretraining freezes the encoder and records its hash") {
    const RunConfig& cfg = fixture().cfg;
    RunPaths paths = run_paths(cfg);
    CHECK(fs::exists(paths.encoder));
    CHECK(fs::exists(paths.encoder_meta));
    CHECK(fs::exists(paths.loss_encoder));

    EncoderArtifact enc = encoder_load(paths);
    CHECK(enc.frozen);
    CHECK_THROWS_AS(require_trainable(enc), ConfigError);

    std::string header = first_line(paths.loss_encoder);
    CHECK(header == "epoch,train_loss,val_loss");

    // a tampered checkpoint no longer matches the recorded hash
    RunConfig tampered = cfg;
    tampered.out_dir = (test_root() / "out_tampered").string();
    fs::create_directories(tampered.out_dir);
    RunPaths tp = run_paths(tampered);
    fs::copy_file(paths.encoder, tp.encoder, fs::copy_options::overwrite_existing);
    fs::copy_file(paths.encoder_meta, tp.encoder_meta,
                  fs::copy_options::overwrite_existing);
    {
        std::fstream f(tp.encoder,
                       std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(-6, std::ios::end);  // flip a payload byte near the end
        char c;
        f.seekg(-6, std::ios::end);
        f.get(c);
        f.seekp(-6, std::ios::end);
        f.put(static_cast<char>(c ^ 0x20));
    }
    CHECK_THROWS_AS(encoder_load(tp), DataError);
}

TEST_CASE("head training writes checkpoints, curves, and keeps the trunk frozen") {
    const RunConfig& cfg = fixture().cfg;
    RunPaths paths = run_paths(cfg);
    CHECK(fs::exists(paths.head_dropout));
    CHECK(fs::exists(paths.loss_head));
    CHECK(fs::exists(paths.loss_dropout));

    RngStream init = derive_stream(cfg.seed, "ssn-init", 0);
    SsnHead head = build_ssn_head(cfg, init);
    Tensor saved = tensor_read(paths.head_ssn);
    CHECK(saved.numel() == ssn_param_count(head));

    Network dropout_head = checkpoint_load(paths.head_dropout);
    CHECK(params_flatten(dropout_head).numel() > 0);

    // trunk untouched by head training: recorded hash still verifies
    EncoderArtifact enc = encoder_load(paths);
    CHECK(network_param_hash(enc.net) == enc.param_hash);

    std::string header = first_line(paths.loss_head);
    CHECK(header == "epoch,train_loss,val_loss");
}

TEST_CASE("laplace posterior round trip and the ssn degenerate case") {
    const RunConfig& cfg = fixture().cfg;
    RunPaths paths = run_paths(cfg);
    HeadPosterior post = posterior_load(paths.posterior);
    RngStream init = derive_stream(cfg.seed, "ssn-init", 0);
    SsnHead head = build_ssn_head(cfg, init);
    CHECK(post.param_count() == ssn_param_count(head));
    bool in_grid = false;
    for (double l : cfg.lambda_grid)
        if (post.prior_precision == doctest::Approx(l)) in_grid = true;
    CHECK(in_grid);

    // the ssn preset ships a maximum-a-posteriori point mass instead
    RunConfig ssn_cfg = tiny_config("ssn", "out_ssn");
    cmd_pretrain_encoder(ssn_cfg);
    cmd_train_head(ssn_cfg);
    cmd_fit_laplace(ssn_cfg);
    HeadPosterior point = posterior_load(run_paths(ssn_cfg).posterior);
    CHECK(point.prior_precision == doctest::Approx(1e8));
    for (std::size_t i = 0; i < point.fisher_diag.numel(); ++i)
        CHECK(point.fisher_diag[i] == 0.0f);
}

TEST_CASE("calibration record and candidate table") {
    const RunConfig& cfg = fixture().cfg;
    RunPaths paths = run_paths(cfg);
    CalibrationRecord rec = calibration_load(paths.calibration);
    CHECK(rec.m == cfg.m);
    CHECK(rec.n_id == cfg.n_val);
    CHECK(rec.n_ood == cfg.n_val);
    // two-path presets score every aux measure x source combination
    CHECK(rec.table.size() == 12);
    std::set<std::string> seen;
    for (const AucRow& row : rec.table) {
        CHECK(row.auc >= 0.0);
        CHECK(row.auc <= 1.0);
        seen.insert(measure_name(row.key.measure) + "/" + path_name(row.key.path));
    }
    CHECK(seen.size() == 12);
    CHECK(seen.count(measure_name(rec.measure) + "/" + path_name(rec.path)) == 1);

    json j = json::parse(slurp(paths.calibration));
    CHECK(j.at("table").size() == 12);
    CHECK(j.at("measure").is_string());
}

TEST_CASE("segmentation evaluation reports per-sample metrics and quartiles") {
    const RunConfig& cfg = fixture().cfg;
    cmd_eval_seg(cfg);
    RunPaths paths = run_paths(cfg);
    CHECK(first_line(paths.eval_seg_csv) == "sample_id,class,dice,iou,hd_mm,ad_mm");
    std::ifstream in(paths.eval_seg_csv);
    std::string line;
    std::getline(in, line);
    int rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == cfg.n_test);

    CHECK(first_line(paths.eval_seg_summary) == "metric,mean,std,p25,p75");
    std::ifstream sm(paths.eval_seg_summary);
    std::getline(sm, line);
    std::vector<std::string> metrics;
    while (std::getline(sm, line))
        if (!line.empty()) metrics.push_back(split_csv(line)[0]);
    CHECK(metrics == std::vector<std::string>{"dice", "iou", "hd_mm", "ad_mm"});

    json j = json::parse(slurp(paths.eval_seg_json));
    for (const char* key : {"dice", "iou", "hd_mm", "ad_mm"}) {
        CHECK(j.at(key).contains("mean"));
        CHECK(j.at(key).contains("p25"));
        CHECK(j.at(key).contains("p75"));
        CHECK(j.at(key).at("p25").get<double>() <= j.at(key).at("p75").get<double>());
    }
}

TEST_CASE("ood evaluation emits the full measure grid deterministically") {
    const RunConfig& cfg = fixture().cfg;
    cmd_eval_ood(cfg);
    RunPaths paths = run_paths(cfg);

    std::string expected;
    for (const char* group : {"individual", "intra", "inter"})
        for (const char* measure : {"ee", "mi", "epkl", "pv", "fused"}) {
            if (!expected.empty()) expected += ",";
            expected += std::string(group) + "_" + measure;
        }
    CHECK(first_line(paths.eval_ood_csv) == expected);

    json j = json::parse(slurp(paths.eval_ood_json));
    CHECK(j.at("preset") == "lfusion");
    CHECK(j.at("n_id") == cfg.n_test);
    CHECK(j.at("n_ood") == cfg.n_test);
    for (const char* group : {"individual", "intra", "inter"})
        for (const char* measure : {"ee", "mi", "epkl", "pv", "fused"}) {
            const json& cell = j.at("groups").at(group).at(measure);
            if (!cell.is_null()) {
                CHECK(cell.get<double>() >= 0.0);
                CHECK(cell.get<double>() <= 1.0);
            }
        }
    // two-path preset: the inter-path column is populated
    CHECK(!j.at("groups").at("inter").at("fused").is_null());

    std::string bytes = slurp(paths.eval_ood_csv);
    cmd_eval_ood(cfg);
    CHECK(slurp(paths.eval_ood_csv) == bytes);
}

TEST_CASE("inference writes masks, maps, counterfactuals, and scores") {
    const RunConfig& cfg = fixture().cfg;
    std::string image = first_image_of(cfg, "test_id");
    std::string mask = (fs::path(cfg.data_dir) / "test_id" / "s0000_mask.lft").string();
    cmd_infer(cfg, image, mask);
    fs::path dir = run_paths(cfg).infer_dir;

    CHECK(fs::exists(dir / "mask.lft"));
    CHECK(fs::exists(dir / "mask.pgm"));
    for (const char* measure : {"ee", "mi", "epkl", "pv", "total_h"})
        for (const char* path : {"l", "d"}) {
            fs::path stem = dir / ("map_" + std::string(measure) + "_" + path);
            CHECK(fs::exists(stem.replace_extension(".lft")));
            CHECK(fs::exists(stem.replace_extension(".pgm")));
        }
    CHECK(fs::exists(dir / "map_fused_inter.lft"));
    CHECK(fs::exists(dir / "map_fused_inter.pgm"));

    json j = json::parse(slurp((dir / "infer.json").string()));
    CHECK(j.at("image") == image);
    CHECK(j.contains("dice"));
    int n_cf = j.at("n_counterfactuals").get<int>();
    CHECK(n_cf >= 0);
    CHECK(n_cf <= cfg.m);
    for (int k = 0; k < n_cf; ++k) {
        char name[40];
        std::snprintf(name, sizeof(name), "counterfactual_%02d.pgm", k);
        CHECK(fs::exists(dir / name));
    }
    CHECK(j.at("scores").contains("ee_l"));
    CHECK(j.at("scores").contains("ee_d"));
    CHECK(j.at("scores").contains("fused_inter"));

    std::string bytes = slurp((dir / "map_fused_inter.lft").string());
    cmd_infer(cfg, image, mask);
    CHECK(slurp((dir / "map_fused_inter.lft").string()) == bytes);
}

TEST_CASE("single-path presets skip the inter-path column") {
    // laplace_unet: frozen encoder + gaussian head + laplace, no dropout path
    RunConfig lap = tiny_config("laplace_unet", "out_laplace");
    cmd_pretrain_encoder(lap);
    cmd_train_head(lap);
    cmd_fit_laplace(lap);
    cmd_calibrate(lap);
    CalibrationRecord rec = calibration_load(run_paths(lap).calibration);
    CHECK(rec.table.size() == 4);
    for (const AucRow& row : rec.table) CHECK(row.key.path == PathId::L);
    cmd_eval_ood(lap);
    json j = json::parse(slurp(run_paths(lap).eval_ood_json));
    CHECK(j.at("groups").at("inter").at("ee").is_null());
    CHECK(j.at("groups").at("inter").at("fused").is_null());
    CHECK(!j.at("groups").at("individual").at("ee").is_null());
    CHECK(!j.at("groups").at("intra").at("fused").is_null());

    // dropout_unet: standalone network, dropout path only
    RunConfig du = tiny_config("dropout_unet", "out_dropout_unet");
    cmd_train_head(du);
    CHECK(fs::exists(run_paths(du).head_unet));
    cmd_eval_seg(du);
    cmd_calibrate(du);
    cmd_eval_ood(du);
    json dj = json::parse(slurp(run_paths(du).eval_ood_json));
    CHECK(!dj.at("groups").at("individual").at("ee").is_null());
    CHECK(dj.at("groups").at("inter").at("fused").is_null());
}

TEST_CASE("the c2 preset pairs the gaussian head with a standalone dropout net") {
    RunConfig c2 = tiny_config("c2", "out_c2");
    cmd_pretrain_encoder(c2);
    cmd_train_head(c2);
    RunPaths paths = run_paths(c2);
    CHECK(fs::exists(paths.head_ssn));
    CHECK(fs::exists(paths.head_unet));
    CHECK(fs::exists(paths.loss_unet));
    cmd_fit_laplace(c2);
    cmd_calibrate(c2);
    CHECK(calibration_load(paths.calibration).table.size() == 12);
    cmd_eval_ood(c2);
    json j = json::parse(slurp(paths.eval_ood_json));
    CHECK(!j.at("groups").at("inter").at("fused").is_null());
}

TEST_CASE("throughput report") {
    RunConfig cfg = fixture().cfg;
    cfg.bench_iters = 100;
    cfg.bench_warmup = 2;
    cmd_bench(cfg);
    json j = json::parse(slurp(run_paths(cfg).bench_json));
    REQUIRE(j.is_array());
    REQUIRE(j.size() == 2);
    std::set<std::string> modes;
    for (const json& entry : j) {
        modes.insert(entry.at("mode").get<std::string>());
        CHECK(entry.at("fps").get<double>() > 0.0);
        CHECK(entry.at("iterations").get<int>() >= 100);
        CHECK(entry.at("image_size").get<int>() ==
              static_cast<int>(cfg.image_size));
    }
    CHECK(modes == std::set<std::string>{"segmentation", "maps"});
}

TEST_CASE("command line exit codes") {
    fs::path dir = test_root() / "cli";
    fs::create_directories(dir / "empty_data");
    fs::create_directories(dir / "out");
    std::string cfg_path = (dir / "cli.cfg").string();
    {
        std::ofstream os(cfg_path);
        os << "n_train = 2\nn_val = 1\nn_test = 1\n"
           << "data_dir = " << (dir / "empty_data").string() << "\n"
           << "out_dir = " << (dir / "out").string() << "\n";
    }
    auto run = [](const std::string& args) {
        std::string cmd = std::string(LFUSION_BIN) + " " + args + " >/dev/null 2>&1";
        int status = std::system(cmd.c_str());
        REQUIRE(status != -1);
        return WEXITSTATUS(status);
    };
    CHECK(run("--help") == 0);
    CHECK(run("synth --config " + cfg_path + " --set bogus=1") == 2);
    CHECK(run("synth --config " + cfg_path + " --set image_size=32") == 2);
    // artifacts missing entirely: a data error, reported as exit 3
    CHECK(run("eval-seg --config " + cfg_path) == 3);
    CHECK(run("infer --config " + cfg_path + " --image " +
              (dir / "missing.lft").string()) == 3);
}
