#include "lfusion/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>

#include <json.hpp>

#include "lfusion/common.hpp"
#include "lfusion/metrics.hpp"

namespace lfusion {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---- small utilities ------------------------------------------------------

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string upper(std::string s) {
    for (char& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return s;
}

long long parse_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        long long v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not an integer: " + value);
    }
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not a number: " + value);
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        std::uint64_t v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': not an unsigned integer: " + value);
    }
}

std::vector<double> parse_grid(const std::string& key, const std::string& value) {
    std::vector<double> out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(parse_double(key, item));
    }
    if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
    return out;
}

std::uint64_t sub_seed(std::uint64_t root, std::string_view purpose,
                       std::uint64_t index = 0) {
    RngStream s = derive_stream(root, purpose, index);
    return rng_next_u64(s);
}

void require_file(const std::string& path, const std::string& hint) {
    if (!fs::exists(path))
        throw DataError("missing artifact " + path + "; run `" + hint + "` first");
}

void write_text(const std::string& path, const std::string& text) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw DataError("cannot open " + path + " for writing");
    std::fwrite(text.data(), 1, text.size(), f);
    std::fclose(f);
}

std::string read_text(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string sample_name(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%04zu", i);
    return buf;
}

// ---- preset traits --------------------------------------------------------

struct PresetTraits {
    bool frozen_encoder = false;  // uses the shared pretrained trunk
    bool has_ssn = false;         // Gaussian logit head (L path)
    bool has_laplace = false;     // real Laplace posterior over the head
    bool has_dropout_head = false;  // dropout head on frozen features
    bool has_unet = false;          // standalone end-to-end dropout net
    bool two_path = false;
    PathId primary = PathId::L;
};

PresetTraits preset_traits(const std::string& preset) {
    PresetTraits t;
    if (preset == "ssn") {
        t.frozen_encoder = t.has_ssn = true;
    } else if (preset == "laplace_unet") {
        t.frozen_encoder = t.has_ssn = t.has_laplace = true;
    } else if (preset == "lfusion" || preset == "c1") {
        t.frozen_encoder = t.has_ssn = t.has_laplace = t.has_dropout_head = true;
        t.two_path = true;
    } else if (preset == "c2") {
        t.frozen_encoder = t.has_ssn = t.has_laplace = t.has_unet = true;
        t.two_path = true;
    } else if (preset == "dropout_unet") {
        t.has_unet = true;
        t.primary = PathId::D;
    } else {
        throw ConfigError("unknown preset: " + preset);
    }
    return t;
}

const char* kMeasureTags[5] = {"ee", "mi", "epkl", "pv", "fused"};
const Measure kAuxMeasures[4] = {Measure::EE, Measure::MI, Measure::EPKL, Measure::PV};

std::string measure_tag(Measure m) {
    switch (m) {
        case Measure::EE: return "ee";
        case Measure::MI: return "mi";
        case Measure::EPKL: return "epkl";
        case Measure::PV: return "pv";
        case Measure::TotalH: return "total_h";
        case Measure::Fused: return "fused";
    }
    return "unknown";
}

std::string path_tag(PathId p) {
    switch (p) {
        case PathId::L: return "l";
        case PathId::D: return "d";
        case PathId::Inter: return "inter";
    }
    return "unknown";
}

}  // namespace

// ---- configuration --------------------------------------------------------

RunConfig config_defaults() { return RunConfig{}; }

void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "preset") cfg.preset = value;
    else if (key == "kind") cfg.kind = value;
    else if (key == "image_size") cfg.image_size = static_cast<std::size_t>(parse_int(key, value));
    else if (key == "classes") cfg.classes = static_cast<int>(parse_int(key, value));
    else if (key == "clip_frames") cfg.clip_frames = static_cast<int>(parse_int(key, value));
    else if (key == "m") cfg.m = static_cast<int>(parse_int(key, value));
    else if (key == "n_inner") cfg.n_inner = static_cast<int>(parse_int(key, value));
    else if (key == "rank") cfg.rank = static_cast<int>(parse_int(key, value));
    else if (key == "fisher_rank") cfg.fisher_rank = static_cast<int>(parse_int(key, value));
    else if (key == "dropout") cfg.dropout = parse_double(key, value);
    else if (key == "lambda_grid") cfg.lambda_grid = parse_grid(key, value);
    else if (key == "encoder_epochs") cfg.encoder_epochs = static_cast<int>(parse_int(key, value));
    else if (key == "head_epochs") cfg.head_epochs = static_cast<int>(parse_int(key, value));
    else if (key == "lr_encoder") cfg.lr_encoder = parse_double(key, value);
    else if (key == "lr_head") cfg.lr_head = parse_double(key, value);
    else if (key == "momentum") cfg.momentum = parse_double(key, value);
    else if (key == "patience") cfg.patience = static_cast<int>(parse_int(key, value));
    else if (key == "t_inner") cfg.t_inner = static_cast<int>(parse_int(key, value));
    else if (key == "n_train") cfg.n_train = static_cast<int>(parse_int(key, value));
    else if (key == "n_val") cfg.n_val = static_cast<int>(parse_int(key, value));
    else if (key == "n_test") cfg.n_test = static_cast<int>(parse_int(key, value));
    else if (key == "ood_alpha") cfg.ood_alpha = parse_double(key, value);
    else if (key == "ood_sigma") cfg.ood_sigma = parse_double(key, value);
    else if (key == "score_reduction") cfg.score_reduction = value;
    else if (key == "score_q") cfg.score_q = parse_double(key, value);
    else if (key == "cf_min_diff") cfg.cf_min_diff = parse_double(key, value);
    else if (key == "bench_iters") cfg.bench_iters = static_cast<int>(parse_int(key, value));
    else if (key == "bench_warmup") cfg.bench_warmup = static_cast<int>(parse_int(key, value));
    else if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "jobs") cfg.jobs = static_cast<unsigned>(parse_int(key, value));
    else if (key == "data_dir") cfg.data_dir = value;
    else if (key == "out_dir") cfg.out_dir = value;
    else throw ConfigError("unknown config key: " + key);
}

namespace {

const char* kConfigKeys[] = {
    "preset", "kind", "image_size", "classes", "clip_frames", "m", "n_inner", "rank",
    "fisher_rank", "dropout", "lambda_grid", "encoder_epochs", "head_epochs",
    "lr_encoder", "lr_head", "momentum", "patience", "t_inner", "n_train", "n_val",
    "n_test", "ood_alpha", "ood_sigma", "score_reduction", "score_q", "cf_min_diff",
    "bench_iters", "bench_warmup", "seed", "jobs", "data_dir", "out_dir",
};

std::string grid_to_string(const std::vector<double>& grid) {
    std::string s;
    char buf[40];
    for (std::size_t i = 0; i < grid.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", grid[i]);
        if (i) s += ",";
        s += buf;
    }
    return s;
}

}  // namespace

RunConfig config_parse_file(const std::string& path) {
    if (config_path_is_json(path)) return run_json_read(path);
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    RunConfig cfg = config_defaults();
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) +
                              ": expected `key = value`");
        try {
            config_set(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return cfg;
}

void config_apply_env(RunConfig& cfg) {
    for (const char* key : kConfigKeys) {
        std::string var = "LFUSION_" + upper(key);
        if (const char* v = std::getenv(var.c_str())) config_set(cfg, key, v);
    }
}

void config_validate(const RunConfig& cfg) {
    preset_traits(cfg.preset);
    parse_kind(cfg.kind);
    if (cfg.image_size < 64 || cfg.image_size % 8 != 0)
        throw ConfigError("image_size must be a multiple of 8 and at least 64");
    if (cfg.classes != 0 && cfg.classes != 1)
        throw ConfigError("only single-logit (binary) heads are supported; "
                          "multi-class phantoms are binarized to the foreground organ");
    if (cfg.clip_frames != 0 && cfg.clip_frames < 2)
        throw ConfigError("clip_frames must be 0 (single-frame) or at least 2");
    if (cfg.clip_frames != 0 && cfg.preset != "dropout_unet")
        throw ConfigError("clip mode supports the dropout_unet preset only");
    if (cfg.m < 2) throw ConfigError("m must be at least 2");
    if (cfg.n_inner < 1) throw ConfigError("n_inner must be at least 1");
    if (cfg.rank < 1 || cfg.fisher_rank < 1)
        throw ConfigError("rank and fisher_rank must be at least 1");
    if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0))
        throw ConfigError("dropout must lie in [0, 1)");
    PresetTraits t = preset_traits(cfg.preset);
    if ((t.has_dropout_head || t.has_unet) && cfg.dropout <= 0.0)
        throw ConfigError("preset " + cfg.preset + " needs dropout > 0");
    for (double l : cfg.lambda_grid)
        if (!(l > 0.0)) throw ConfigError("lambda_grid entries must be positive");
    if (cfg.encoder_epochs < 1 || cfg.head_epochs < 1)
        throw ConfigError("epoch counts must be at least 1");
    if (cfg.patience < 1) throw ConfigError("patience must be at least 1");
    if (cfg.t_inner < 1) throw ConfigError("t_inner must be at least 1");
    if (cfg.n_train < 1 || cfg.n_val < 1 || cfg.n_test < 1)
        throw ConfigError("split sizes must be at least 1");
    if (!(cfg.ood_alpha >= 0.0) || !(cfg.ood_sigma > 0.0))
        throw ConfigError("ood_alpha must be >= 0 and ood_sigma > 0");
    if (cfg.score_reduction != "mean" && cfg.score_reduction != "topk")
        throw ConfigError("score_reduction must be `mean` or `topk`");
    if (!(cfg.score_q > 0.0 && cfg.score_q <= 1.0))
        throw ConfigError("score_q must lie in (0, 1]");
    if (!(cfg.cf_min_diff >= 0.0 && cfg.cf_min_diff <= 1.0))
        throw ConfigError("cf_min_diff must lie in [0, 1]");
    if (cfg.bench_iters < 1 || cfg.bench_warmup < 0)
        throw ConfigError("bench_iters must be >= 1 and bench_warmup >= 0");
}

int resolved_classes(const RunConfig& cfg) { return cfg.classes == 0 ? 1 : cfg.classes; }

void run_json_write(const RunConfig& cfg, const std::string& command,
                    const std::string& path) {
    json j;
    j["command"] = command;
    json c;
    c["preset"] = cfg.preset;
    c["kind"] = cfg.kind;
    c["image_size"] = cfg.image_size;
    c["classes"] = cfg.classes;
    c["clip_frames"] = cfg.clip_frames;
    c["m"] = cfg.m;
    c["n_inner"] = cfg.n_inner;
    c["rank"] = cfg.rank;
    c["fisher_rank"] = cfg.fisher_rank;
    c["dropout"] = cfg.dropout;
    c["lambda_grid"] = cfg.lambda_grid;
    c["encoder_epochs"] = cfg.encoder_epochs;
    c["head_epochs"] = cfg.head_epochs;
    c["lr_encoder"] = cfg.lr_encoder;
    c["lr_head"] = cfg.lr_head;
    c["momentum"] = cfg.momentum;
    c["patience"] = cfg.patience;
    c["t_inner"] = cfg.t_inner;
    c["n_train"] = cfg.n_train;
    c["n_val"] = cfg.n_val;
    c["n_test"] = cfg.n_test;
    c["ood_alpha"] = cfg.ood_alpha;
    c["ood_sigma"] = cfg.ood_sigma;
    c["score_reduction"] = cfg.score_reduction;
    c["score_q"] = cfg.score_q;
    c["cf_min_diff"] = cfg.cf_min_diff;
    c["bench_iters"] = cfg.bench_iters;
    c["bench_warmup"] = cfg.bench_warmup;
    c["seed"] = cfg.seed;
    c["jobs"] = cfg.jobs;
    c["data_dir"] = cfg.data_dir;
    c["out_dir"] = cfg.out_dir;
    j["config"] = c;
    write_text(path, j.dump(2) + "\n");
}

RunConfig run_json_read(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw ConfigError(path + ": invalid run.json: " + e.what());
    }
    if (!j.contains("config")) throw ConfigError(path + ": missing `config` object");
    const json& c = j["config"];
    RunConfig cfg = config_defaults();
    try {
        cfg.preset = c.at("preset").get<std::string>();
        cfg.kind = c.at("kind").get<std::string>();
        cfg.image_size = c.at("image_size").get<std::size_t>();
        cfg.classes = c.at("classes").get<int>();
        cfg.clip_frames = c.at("clip_frames").get<int>();
        cfg.m = c.at("m").get<int>();
        cfg.n_inner = c.at("n_inner").get<int>();
        cfg.rank = c.at("rank").get<int>();
        cfg.fisher_rank = c.at("fisher_rank").get<int>();
        cfg.dropout = c.at("dropout").get<double>();
        cfg.lambda_grid = c.at("lambda_grid").get<std::vector<double>>();
        cfg.encoder_epochs = c.at("encoder_epochs").get<int>();
        cfg.head_epochs = c.at("head_epochs").get<int>();
        cfg.lr_encoder = c.at("lr_encoder").get<double>();
        cfg.lr_head = c.at("lr_head").get<double>();
        cfg.momentum = c.at("momentum").get<double>();
        cfg.patience = c.at("patience").get<int>();
        cfg.t_inner = c.at("t_inner").get<int>();
        cfg.n_train = c.at("n_train").get<int>();
        cfg.n_val = c.at("n_val").get<int>();
        cfg.n_test = c.at("n_test").get<int>();
        cfg.ood_alpha = c.at("ood_alpha").get<double>();
        cfg.ood_sigma = c.at("ood_sigma").get<double>();
        cfg.score_reduction = c.at("score_reduction").get<std::string>();
        cfg.score_q = c.at("score_q").get<double>();
        cfg.cf_min_diff = c.at("cf_min_diff").get<double>();
        cfg.bench_iters = c.at("bench_iters").get<int>();
        cfg.bench_warmup = c.at("bench_warmup").get<int>();
        cfg.seed = c.at("seed").get<std::uint64_t>();
        cfg.jobs = c.at("jobs").get<unsigned>();
        cfg.data_dir = c.at("data_dir").get<std::string>();
        cfg.out_dir = c.at("out_dir").get<std::string>();
    } catch (const json::exception& e) {
        throw ConfigError(path + ": malformed run.json: " + e.what());
    }
    return cfg;
}

bool config_path_is_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) return false;
    char c = 0;
    while (in.get(c))
        if (!std::isspace(static_cast<unsigned char>(c))) return c == '{';
    return false;
}

// ---- artifact layout ------------------------------------------------------

RunPaths run_paths(const RunConfig& cfg) {
    fs::path out(cfg.out_dir);
    RunPaths p;
    p.run_json = (out / "run.json").string();
    p.encoder = (out / "encoder.lfc").string();
    p.encoder_meta = (out / "encoder.json").string();
    p.loss_encoder = (out / "loss_encoder.csv").string();
    p.head_ssn = (out / "head_ssn.lft").string();
    p.loss_head = (out / "loss_head.csv").string();
    p.head_dropout = (out / "head_dropout.lfc").string();
    p.loss_dropout = (out / "loss_dropout.csv").string();
    p.head_unet = (out / "head_unet.lfc").string();
    p.loss_unet = (out / "loss_unet.csv").string();
    p.posterior = (out / "posterior.lfp").string();
    p.calibration = (out / "calibration.json").string();
    p.eval_seg_csv = (out / "eval_seg.csv").string();
    p.eval_seg_summary = (out / "eval_seg_summary.csv").string();
    p.eval_seg_json = (out / "eval_seg.json").string();
    p.eval_ood_csv = (out / "eval_ood.csv").string();
    p.eval_ood_json = (out / "eval_ood.json").string();
    p.bench_json = (out / "bench.json").string();
    p.infer_dir = (out / "infer").string();
    return p;
}

SplitPaths split_paths(const RunConfig& cfg) {
    fs::path d(cfg.data_dir);
    return SplitPaths{(d / "train").string(), (d / "val_id").string(),
                      (d / "val_ood").string(), (d / "test_id").string(),
                      (d / "test_ood").string()};
}

// ---- architectures --------------------------------------------------------

std::vector<LayerSpec> encoder_specs(bool clip) {
    std::vector<LayerSpec> v;
    if (!clip) {
        v.push_back(LayerSpec::conv2d(1, 16, 3, 2));
        v.push_back(LayerSpec::relu());
        v.push_back(LayerSpec::conv2d(16, 32, 3, 2));
        v.push_back(LayerSpec::relu());
        v.push_back(LayerSpec::conv2d(32, 64, 3, 2));
        v.push_back(LayerSpec::relu());
        v.push_back(LayerSpec::conv2d(64, 64, 3, 1));
        v.push_back(LayerSpec::relu());
    } else {
        v.push_back(LayerSpec::conv3d(1, 8, 3, 2));
        v.push_back(LayerSpec::batchnorm3d(8));
        v.push_back(LayerSpec::relu());
        v.push_back(LayerSpec::conv3d(8, 16, 3, 2));
        v.push_back(LayerSpec::batchnorm3d(16));
        v.push_back(LayerSpec::relu());
        v.push_back(LayerSpec::conv3d(16, 16, 3, 2));
        v.push_back(LayerSpec::batchnorm3d(16));
        v.push_back(LayerSpec::relu());
        v.push_back(LayerSpec::conv3d(16, 16, 3, 1));
        v.push_back(LayerSpec::relu());
    }
    return v;
}

std::vector<LayerSpec> decoder_specs(int in_channels, int classes, double dropout_rate,
                                     bool clip) {
    std::vector<LayerSpec> v;
    if (!clip) {
        v.push_back(LayerSpec::upsample2x());
        v.push_back(LayerSpec::conv2d(in_channels, 16, 3, 1));
        v.push_back(LayerSpec::relu());
        if (dropout_rate > 0.0) v.push_back(LayerSpec::dropout(dropout_rate));
        v.push_back(LayerSpec::upsample2x());
        v.push_back(LayerSpec::conv2d(16, 8, 3, 1));
        v.push_back(LayerSpec::relu());
        if (dropout_rate > 0.0) v.push_back(LayerSpec::dropout(dropout_rate));
        v.push_back(LayerSpec::upsample2x());
        v.push_back(LayerSpec::conv2d(8, 8, 3, 1));
        v.push_back(LayerSpec::relu());
        v.push_back(LayerSpec::conv2d(8, classes, 1, 1));
    } else {
        v.push_back(LayerSpec::upsample2x());
        v.push_back(LayerSpec::conv3d(in_channels, 8, 3, 1));
        v.push_back(LayerSpec::relu());
        if (dropout_rate > 0.0) v.push_back(LayerSpec::dropout(dropout_rate));
        v.push_back(LayerSpec::upsample2x());
        v.push_back(LayerSpec::conv3d(8, 4, 3, 1));
        v.push_back(LayerSpec::relu());
        if (dropout_rate > 0.0) v.push_back(LayerSpec::dropout(dropout_rate));
        v.push_back(LayerSpec::upsample2x());
        v.push_back(LayerSpec::conv3d(4, 4, 3, 1));
        v.push_back(LayerSpec::relu());
        v.push_back(LayerSpec::conv3d(4, classes, 1, 1));
    }
    return v;
}

SsnHead build_ssn_head(const RunConfig& cfg, RngStream& init) {
    int classes = resolved_classes(cfg);
    SsnHead head;
    head.classes = classes;
    head.rank = cfg.rank;
    std::vector<LayerSpec> trunk = {
        LayerSpec::upsample2x(), LayerSpec::conv2d(64, 16, 3, 1), LayerSpec::relu(),
        LayerSpec::upsample2x(), LayerSpec::conv2d(16, 8, 3, 1),  LayerSpec::relu(),
        LayerSpec::upsample2x(), LayerSpec::conv2d(8, 8, 3, 1),   LayerSpec::relu(),
    };
    head.trunk = network_new(trunk, init);
    head.mu_branch = network_new({LayerSpec::conv2d(8, classes, 1, 1)}, init);
    head.p_branch = network_new({LayerSpec::conv2d(8, classes * cfg.rank, 1, 1)}, init);
    head.d_branch = network_new({LayerSpec::conv2d(8, classes, 1, 1)}, init);
    return head;
}

Network build_dropout_head(const RunConfig& cfg, RngStream& init) {
    return network_new(decoder_specs(64, resolved_classes(cfg), cfg.dropout, false),
                       init);
}

Network build_unet(const RunConfig& cfg, bool with_dropout, RngStream& init) {
    bool clip = cfg.clip_frames > 0;
    std::vector<LayerSpec> specs = encoder_specs(clip);
    int feat = clip ? 16 : 64;
    std::vector<LayerSpec> dec =
        decoder_specs(feat, resolved_classes(cfg), with_dropout ? cfg.dropout : 0.0, clip);
    specs.insert(specs.end(), dec.begin(), dec.end());
    return network_new(specs, init);
}

void split_unet(const Network& full, Network& trunk, Network& head) {
    bool clip = !full.layers.empty() && full.layers[0].kind == LayerKind::Conv3d;
    std::size_t cut = encoder_specs(clip).size();
    if (full.layers.size() <= cut)
        throw DataError("split_unet: network too small to split");
    trunk.layers.assign(full.layers.begin(), full.layers.begin() + cut);
    trunk.params.assign(full.params.begin(), full.params.begin() + cut);
    trunk.buffers.assign(full.buffers.begin(), full.buffers.begin() + cut);
    head.layers.assign(full.layers.begin() + cut, full.layers.end());
    head.params.assign(full.params.begin() + cut, full.params.end());
    head.buffers.assign(full.buffers.begin() + cut, full.buffers.end());
}

// ---- frozen encoder artifact ----------------------------------------------

std::uint64_t network_param_hash(const Network& net) {
    Tensor flat = params_flatten(net);
    return fnv1a64(flat.data(), flat.numel() * sizeof(float));
}

void encoder_save(const EncoderArtifact& enc, const RunPaths& paths) {
    checkpoint_save(enc.net, paths.encoder);
    json j;
    j["frozen"] = enc.frozen;
    char buf[24];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(enc.param_hash));
    j["param_hash"] = buf;
    j["train_dice"] = enc.train_dice;
    write_text(paths.encoder_meta, j.dump(2) + "\n");
}

EncoderArtifact encoder_load(const RunPaths& paths) {
    require_file(paths.encoder, "pretrain-encoder");
    require_file(paths.encoder_meta, "pretrain-encoder");
    EncoderArtifact enc;
    enc.net = checkpoint_load(paths.encoder);
    json j;
    try {
        j = json::parse(read_text(paths.encoder_meta));
        enc.frozen = j.at("frozen").get<bool>();
        enc.param_hash = std::stoull(j.at("param_hash").get<std::string>(), nullptr, 16);
        enc.train_dice = j.value("train_dice", 0.0);
    } catch (const std::exception& e) {
        throw DataError(paths.encoder_meta + ": malformed encoder metadata");
    }
    if (network_param_hash(enc.net) != enc.param_hash)
        throw DataError("encoder checkpoint does not match its recorded hash");
    return enc;
}

void require_trainable(const EncoderArtifact& enc) {
    if (enc.frozen)
        throw ConfigError(
            "encoder checkpoint is frozen; gradient updates on it are rejected");
}

// ---- plain supervised training --------------------------------------------

namespace {

struct PixelLoss {
    double loss = 0.0;
    Tensor grad;
};

// Stable binary cross-entropy from logits, summed over pixels (the same
// per-image units the head trainers report).
PixelLoss bce_from_logits(const Tensor& logits, const Tensor& target) {
    if (logits.numel() != target.numel())
        throw DataError("loss: logits and target disagree in size");
    std::size_t n = logits.numel();
    PixelLoss out;
    out.grad = Tensor(logits.shape(), 0.0f);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double l = logits[i];
        double y = target[i];
        acc += std::max(l, 0.0) - l * y + std::log1p(std::exp(-std::fabs(l)));
        double p = 1.0 / (1.0 + std::exp(-l));
        out.grad[i] = static_cast<float>(p - y);
    }
    out.loss = acc;
    return out;
}

double eval_bce(const Network& net, const Dataset& data) {
    double acc = 0.0;
    for (const Sample& s : data) {
        Tensor logits = forward_eval(net, s.image);
        acc += bce_from_logits(logits, s.mask).loss;
    }
    return acc / static_cast<double>(data.size());
}

std::vector<std::vector<Tensor>> copy_buffers(const Network& net) { return net.buffers; }

void restore_buffers(Network& net, const std::vector<std::vector<Tensor>>& buffers) {
    net.buffers = buffers;
}

}  // namespace

TrainCurve train_plain(Network& net, const Dataset& train, const Dataset& val,
                       int epochs, double lr, double momentum, int patience,
                       std::uint64_t seed) {
    if (train.empty()) throw DataError("train_plain: empty training set");
    if (val.empty()) throw DataError("train_plain: empty validation set");
    OptimConfig oc;
    oc.lr = lr;
    oc.momentum = momentum;
    OptimState state;
    TrainCurve curve;
    double best = std::numeric_limits<double>::infinity();
    Tensor best_params;
    std::vector<std::vector<Tensor>> best_buffers;
    int bad = 0;
    std::uint64_t step = 0;
    for (int e = 0; e < epochs; ++e) {
        double acc = 0.0;
        for (const Sample& s : train) {
            RngStream dr = derive_stream(seed, "plain-drop", step++);
            Activations acts = forward(net, s.image, Mode::Train, &dr);
            PixelLoss pl = bce_from_logits(acts.output(), s.mask);
            acc += pl.loss;
            GradBundle grads = backward(net, acts, pl.grad);
            optimizer_step(net, grads, oc, state);
        }
        double train_loss = acc / static_cast<double>(train.size());
        if (!std::isfinite(train_loss))
            throw NumericError("training diverged (non-finite loss at epoch " +
                               std::to_string(e) + ")");
        double val_loss = eval_bce(net, val);
        curve.train_loss.push_back(train_loss);
        curve.val_loss.push_back(val_loss);
        if (val_loss < best - 1e-12) {
            best = val_loss;
            best_params = params_flatten(net);
            best_buffers = copy_buffers(net);
            curve.best_epoch = e;
            bad = 0;
        } else if (++bad >= patience) {
            break;
        }
    }
    if (best_params.numel() > 0) {
        params_load(net, best_params);
        restore_buffers(net, best_buffers);
    }
    return curve;
}

void write_loss_csv(const std::string& path, const TrainCurve& curve) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw DataError("cannot open " + path + " for writing");
    std::fprintf(f, "epoch,train_loss,val_loss\n");
    for (std::size_t e = 0; e < curve.train_loss.size(); ++e)
        std::fprintf(f, "%zu,%.17g,%.17g\n", e, curve.train_loss[e],
                     curve.val_loss[e]);
    std::fclose(f);
}

// ---- data helpers ---------------------------------------------------------

namespace {

SampleRecord gen_phantom(const RunConfig& cfg, PhantomKind kind, std::uint64_t seed) {
    SampleRecord rec = kind == PhantomKind::Head
                           ? gen_head_phantom(seed, cfg.image_size)
                           : gen_heart_phantom(seed, cfg.image_size);
    return rec;
}

// The trained head is binary: heart phantoms are collapsed to the organ
// (heart wall + chambers) against everything else.
Tensor binary_truth(const SampleRecord& rec) {
    if (rec.kind == PhantomKind::Head) return rec.mask;
    Tensor out(rec.mask.shape(), 0.0f);
    for (std::size_t i = 0; i < rec.mask.numel(); ++i)
        out[i] = rec.mask[i] >= 2.0f ? 1.0f : 0.0f;
    return out;
}

Dataset dataset_from_records(const std::vector<SampleRecord>& recs) {
    Dataset out;
    out.reserve(recs.size());
    for (const SampleRecord& r : recs) out.push_back({r.image, binary_truth(r)});
    return out;
}

std::vector<SampleRecord> load_split(const std::string& dir, const char* which) {
    if (!fs::exists(fs::path(dir) / "manifest.csv"))
        throw DataError("dataset split " + std::string(which) + " missing at " + dir +
                        "; run `synth` first");
    return dataset_read(dir);
}

// Features of the frozen encoder for a whole split, computed once.
Dataset features_of(const Network& encoder, const Dataset& data) {
    Dataset out;
    out.reserve(data.size());
    for (const Sample& s : data) out.push_back({forward_eval(encoder, s.image), s.mask});
    return out;
}

// ---- model artifacts ------------------------------------------------------

struct Artifacts {
    PresetTraits traits;
    EncoderArtifact enc;
    SsnHead head;
    HeadPosterior post;
    Network dropout_head;
    Network unet;
    Network d_trunk;  // trunk/head split of the standalone net
    Network d_head;
    bool has_cal = false;
    CalibrationRecord cal;
};

Artifacts load_artifacts(const RunConfig& cfg, bool need_posterior, bool need_cal) {
    RunPaths paths = run_paths(cfg);
    Artifacts art;
    art.traits = preset_traits(cfg.preset);
    if (art.traits.frozen_encoder) art.enc = encoder_load(paths);
    if (art.traits.has_ssn) {
        require_file(paths.head_ssn, "train-head");
        RngStream init = derive_stream(cfg.seed, "ssn-init");
        art.head = build_ssn_head(cfg, init);
        ssn_params_load(art.head, tensor_read(paths.head_ssn));
        if (need_posterior) {
            require_file(paths.posterior, "fit-laplace");
            art.post = posterior_load(paths.posterior);
        }
    }
    if (art.traits.has_dropout_head) {
        require_file(paths.head_dropout, "train-head");
        art.dropout_head = checkpoint_load(paths.head_dropout);
    }
    if (art.traits.has_unet) {
        require_file(paths.head_unet, "train-head");
        art.unet = checkpoint_load(paths.head_unet);
        split_unet(art.unet, art.d_trunk, art.d_head);
    }
    if (need_cal) {
        require_file(paths.calibration, "calibrate");
        art.cal = calibration_load(paths.calibration);
        art.has_cal = true;
    }
    return art;
}

// ---- predictive stacks ----------------------------------------------------

struct StackSet {
    PredictiveStack l;  // Gaussian/Laplace path, n_inner logit draws per outer sample
    PredictiveStack d;  // dropout path, one draw per pass
    bool has_l = false;
    bool has_d = false;
};

// Even/odd split along the outer sample axis; both halves get floor(m/2).
void split_halves(const PredictiveStack& s, PredictiveStack& a, PredictiveStack& b) {
    std::size_t m2 = static_cast<std::size_t>(s.m) / 2;
    if (m2 < 1) throw DataError("need at least two outer samples to split a stack");
    std::vector<std::size_t> shape = s.logits.shape();
    std::size_t chunk = 1;
    for (std::size_t d = 1; d < shape.size(); ++d) chunk *= shape[d];
    std::vector<std::size_t> half_shape = shape;
    half_shape[0] = m2;
    a.logits = Tensor(half_shape, 0.0f);
    a.probs = Tensor(half_shape, 0.0f);
    b.logits = Tensor(half_shape, 0.0f);
    b.probs = Tensor(half_shape, 0.0f);
    for (std::size_t j = 0; j < m2; ++j) {
        std::memcpy(a.logits.data() + j * chunk, s.logits.data() + (2 * j) * chunk,
                    chunk * sizeof(float));
        std::memcpy(a.probs.data() + j * chunk, s.probs.data() + (2 * j) * chunk,
                    chunk * sizeof(float));
        std::memcpy(b.logits.data() + j * chunk, s.logits.data() + (2 * j + 1) * chunk,
                    chunk * sizeof(float));
        std::memcpy(b.probs.data() + j * chunk, s.probs.data() + (2 * j + 1) * chunk,
                    chunk * sizeof(float));
    }
    a.m = b.m = static_cast<int>(m2);
    a.n_inner = b.n_inner = s.n_inner;
    a.root_seed = b.root_seed = s.root_seed;
}

// MC-dropout stack for clip-shaped outputs (C, T, H, W).
PredictiveStack mc_dropout_stack_any(const Network& trunk, Network& head,
                                     const Tensor& image, int m, RngStream& rng) {
    Tensor f = forward_eval(trunk, image);
    Tensor probe = forward_eval(head, f);
    std::vector<std::size_t> shape = {static_cast<std::size_t>(m), 1};
    for (std::size_t d = 0; d < probe.ndim(); ++d) shape.push_back(probe.extent(d));
    std::size_t n = probe.numel();
    PredictiveStack stack;
    stack.m = m;
    stack.n_inner = 1;
    stack.root_seed = rng.root_seed;
    stack.logits = Tensor(shape, 0.0f);
    for (int j = 0; j < m; ++j) {
        RngStream s = derive_stream(rng.root_seed, "clip-mc",
                                    rng_mix64(rng.stream_id) + static_cast<std::uint64_t>(j));
        stack.draw_streams.push_back(s.stream_id);
        Activations acts = forward(head, f, Mode::McDropout, &s);
        std::copy(acts.output().data(), acts.output().data() + n,
                  stack.logits.data() + static_cast<std::size_t>(j) * n);
    }
    stack.probs = Tensor(shape, 0.0f);
    for (std::size_t i = 0; i < stack.logits.numel(); ++i)
        stack.probs[i] =
            static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(stack.logits[i]))));
    return stack;
}

StackSet build_stacks(const RunConfig& cfg, const Artifacts& art, const Tensor& image,
                      const std::string& purpose, std::size_t index) {
    StackSet out;
    Artifacts& mut = const_cast<Artifacts&>(art);  // dropout forwards need non-const
    if (art.traits.has_ssn) {
        RngStream rs = derive_stream(cfg.seed, purpose + "/l", index);
        out.l = predictive_samples(art.enc.net, art.head, art.post, image, cfg.m,
                                   cfg.n_inner, rs);
        out.has_l = true;
    }
    // The fusion pairs samples after flattening, so the dropout stack of a
    // two-path preset is drawn with the same flattened count as the L stack.
    int m_d = art.traits.two_path ? cfg.m * cfg.n_inner : cfg.m;
    if (art.traits.has_dropout_head) {
        RngStream rs = derive_stream(cfg.seed, purpose + "/d", index);
        out.d = predictive_samples_dropout(art.enc.net, mut.dropout_head, image, m_d, rs);
        out.has_d = true;
    } else if (art.traits.has_unet) {
        RngStream rs = derive_stream(cfg.seed, purpose + "/d", index);
        if (cfg.clip_frames > 0)
            out.d = mc_dropout_stack_any(art.d_trunk, mut.d_head, image, m_d, rs);
        else
            out.d = predictive_samples_dropout(art.d_trunk, mut.d_head, image, m_d, rs);
        out.has_d = true;
    }
    return out;
}

const PredictiveStack& primary_stack(const StackSet& s, const PresetTraits& t) {
    if (t.primary == PathId::L) {
        if (!s.has_l) throw DataError("primary path stack missing");
        return s.l;
    }
    if (!s.has_d) throw DataError("primary path stack missing");
    return s.d;
}

// Deterministic segmentation logits (the MAP / eval-mode forward).
Tensor deterministic_logits(const Artifacts& art, const Tensor& image) {
    if (art.traits.has_ssn) {
        Tensor f = forward_eval(art.enc.net, image);
        return ssn_forward(art.head, f).mu;
    }
    return forward_eval(art.unet, image);
}

Tensor threshold_mask(const Tensor& logits) {
    Tensor out(std::vector<std::size_t>(logits.shape().begin() + 1,
                                        logits.shape().end()),
               0.0f);
    for (std::size_t i = 0; i < logits.numel(); ++i)
        out[i] = logits[i] > 0.0f ? 1.0f : 0.0f;
    return out;
}

}  // namespace

// ---- calibration record ---------------------------------------------------

void calibration_save(const CalibrationRecord& rec, const std::string& path) {
    json j;
    j["measure"] = measure_name(rec.measure);
    j["path"] = path_name(rec.path);
    j["m"] = rec.m;
    j["n_id"] = rec.n_id;
    j["n_ood"] = rec.n_ood;
    json rows = json::array();
    for (const AucRow& r : rec.table) {
        json row;
        row["measure"] = measure_name(r.key.measure);
        row["path"] = path_name(r.key.path);
        row["auc"] = r.auc;
        row["n_id"] = r.n_id;
        row["n_ood"] = r.n_ood;
        rows.push_back(row);
    }
    j["table"] = rows;
    write_text(path, j.dump(2) + "\n");
}

CalibrationRecord calibration_load(const std::string& path) {
    CalibrationRecord rec;
    try {
        json j = json::parse(read_text(path));
        rec.measure = parse_measure(j.at("measure").get<std::string>());
        rec.path = parse_path(j.at("path").get<std::string>());
        rec.m = j.at("m").get<int>();
        rec.n_id = j.at("n_id").get<std::size_t>();
        rec.n_ood = j.at("n_ood").get<std::size_t>();
        for (const json& row : j.at("table")) {
            AucRow r;
            r.key.measure = parse_measure(row.at("measure").get<std::string>());
            r.key.path = parse_path(row.at("path").get<std::string>());
            r.auc = row.at("auc").get<double>();
            r.n_id = row.at("n_id").get<std::size_t>();
            r.n_ood = row.at("n_ood").get<std::size_t>();
            rec.table.push_back(r);
        }
    } catch (const json::exception& e) {
        throw DataError(path + ": malformed calibration record: " + e.what());
    }
    return rec;
}

// ---- OOD table ------------------------------------------------------------

void write_ood_table(const OodTable& table, const RunPaths& paths,
                     const RunConfig& cfg) {
    std::FILE* f = std::fopen(paths.eval_ood_csv.c_str(), "wb");
    if (!f) throw DataError("cannot open " + paths.eval_ood_csv + " for writing");
    for (std::size_t i = 0; i < table.cells.size(); ++i)
        std::fprintf(f, "%s%s_%s", i ? "," : "", table.cells[i].group.c_str(),
                     table.cells[i].measure.c_str());
    std::fprintf(f, "\n");
    for (std::size_t i = 0; i < table.cells.size(); ++i) {
        if (std::isnan(table.cells[i].auc))
            std::fprintf(f, "%snan", i ? "," : "");
        else
            std::fprintf(f, "%s%.10g", i ? "," : "", table.cells[i].auc);
    }
    std::fprintf(f, "\n");
    std::fclose(f);

    json j;
    j["preset"] = cfg.preset;
    j["n_id"] = table.n_id;
    j["n_ood"] = table.n_ood;
    json groups;
    for (const OodCell& c : table.cells) {
        if (std::isnan(c.auc))
            groups[c.group][c.measure] = nullptr;
        else
            groups[c.group][c.measure] = c.auc;
    }
    j["groups"] = groups;
    write_text(paths.eval_ood_json, j.dump(2) + "\n");
}

// ---- commands -------------------------------------------------------------

void cmd_synth(const RunConfig& cfg) {
    config_validate(cfg);
    PhantomKind kind = parse_kind(cfg.kind);
    SplitPaths sp = split_paths(cfg);
    fs::create_directories(cfg.data_dir);

    struct SplitSpec {
        const char* name;
        std::string dir;
        std::size_t count;
        bool ood;
    };
    std::vector<SplitSpec> splits = {
        {"train", sp.train, static_cast<std::size_t>(cfg.n_train), false},
        {"val_id", sp.val_id, static_cast<std::size_t>(cfg.n_val), false},
        {"val_ood", sp.val_ood, static_cast<std::size_t>(cfg.n_val), true},
        {"test_id", sp.test_id, static_cast<std::size_t>(cfg.n_test), false},
        {"test_ood", sp.test_ood, static_cast<std::size_t>(cfg.n_test), true},
    };
    for (const SplitSpec& split : splits) {
        std::vector<SampleRecord> recs(split.count);
        std::string base = std::string("synth/") + split.name;
        parallel_for(split.count, cfg.jobs, [&](std::size_t i) {
            SampleRecord rec = gen_phantom(cfg, kind, sub_seed(cfg.seed, base, i));
            if (cfg.clip_frames > 0)
                rec = gen_clip(rec, cfg.clip_frames, MotionConfig{},
                               sub_seed(cfg.seed, base + "/clip", i));
            if (split.ood)
                rec = elastic_deform(rec, cfg.ood_alpha, cfg.ood_sigma,
                                     sub_seed(cfg.seed, base + "/elastic", i));
            recs[i] = std::move(rec);
        });
        dataset_write(recs, split.dir);
    }
    fs::create_directories(cfg.out_dir);
    run_json_write(cfg, "synth", run_paths(cfg).run_json);
}

void cmd_pretrain_encoder(const RunConfig& cfg) {
    config_validate(cfg);
    if (cfg.clip_frames > 0)
        throw ConfigError("pretrain-encoder applies to single-frame mode only");
    SplitPaths sp = split_paths(cfg);
    Dataset train = dataset_from_records(load_split(sp.train, "train"));
    Dataset val = dataset_from_records(load_split(sp.val_id, "val_id"));

    RngStream init = derive_stream(cfg.seed, "encoder-init");
    Network net = build_unet(cfg, /*with_dropout=*/false, init);
    TrainCurve curve = train_plain(net, train, val, cfg.encoder_epochs, cfg.lr_encoder,
                                   cfg.momentum, cfg.patience,
                                   sub_seed(cfg.seed, "encoder-train"));

    double dice_acc = 0.0;
    for (std::size_t i = 0; i < train.size(); ++i) {
        Tensor pred = threshold_mask(forward_eval(net, train[i].image));
        dice_acc += dice(pred, train[i].mask);
    }

    Network trunk, throwaway;
    split_unet(net, trunk, throwaway);
    EncoderArtifact enc;
    enc.net = std::move(trunk);
    enc.frozen = true;
    enc.param_hash = network_param_hash(enc.net);
    enc.train_dice = dice_acc / static_cast<double>(train.size());

    RunPaths paths = run_paths(cfg);
    fs::create_directories(cfg.out_dir);
    encoder_save(enc, paths);
    write_loss_csv(paths.loss_encoder, curve);
    run_json_write(cfg, "pretrain-encoder", paths.run_json);
}

namespace {

double ssn_val_nll(SsnHead& head, const Dataset& feats, int t_inner,
                   std::uint64_t seed) {
    double acc = 0.0;
    for (std::size_t i = 0; i < feats.size(); ++i) {
        LowRankGaussian dist = ssn_forward(head, feats[i].image);
        RngStream rs = derive_stream(seed, "head-val", i);
        acc += ssn_nll(dist, feats[i].mask, t_inner, rs).loss;
    }
    return acc / static_cast<double>(feats.size());
}

// Chunked fit_map with early stopping on a fixed-noise validation NLL.
TrainCurve train_ssn_head(SsnHead& head, const Dataset& feats_train,
                          const Dataset& feats_val, const RunConfig& cfg) {
    Network no_encoder;  // features are precomputed; identity trunk
    FitConfig fc;
    fc.epochs = 1;
    fc.lr = cfg.lr_head;
    fc.momentum = cfg.momentum;
    fc.t_inner = cfg.t_inner;
    fc.seed = sub_seed(cfg.seed, "head-train");
    TrainCurve curve;
    double best = std::numeric_limits<double>::infinity();
    Tensor best_flat;
    int bad = 0;
    std::uint64_t val_seed = sub_seed(cfg.seed, "head-val-noise");
    for (int e = 0; e < cfg.head_epochs; ++e) {
        FitReport rep = fit_map(head, no_encoder, feats_train, fc);
        double tl = rep.epoch_loss.at(0);
        if (!std::isfinite(tl))
            throw NumericError("head training diverged at epoch " + std::to_string(e));
        double vl = ssn_val_nll(head, feats_val, cfg.t_inner, val_seed);
        curve.train_loss.push_back(tl);
        curve.val_loss.push_back(vl);
        if (vl < best - 1e-12) {
            best = vl;
            best_flat = ssn_params_flatten(head);
            curve.best_epoch = e;
            bad = 0;
        } else if (++bad >= cfg.patience) {
            break;
        }
    }
    if (best_flat.numel() > 0) ssn_params_load(head, best_flat);
    return curve;
}

TrainCurve train_dropout_head(Network& head, const Dataset& feats_train,
                              const Dataset& feats_val, const RunConfig& cfg) {
    Network no_encoder;
    // One-epoch chunks under a fixed seed keep each image's dropout mask
    // constant across epochs (common random numbers), so the reported loss
    // tracks a deterministic objective and decreases smoothly.
    FitConfig fc;
    fc.epochs = 1;
    fc.lr = cfg.lr_head;
    fc.momentum = cfg.momentum;
    fc.seed = sub_seed(cfg.seed, "dropout-train");
    TrainCurve curve;
    double best = std::numeric_limits<double>::infinity();
    Tensor best_flat;
    int bad = 0;
    for (int e = 0; e < cfg.head_epochs; ++e) {
        FitReport rep = fit_map_dropout(head, no_encoder, feats_train, fc);
        double tl = rep.epoch_loss.at(0);
        if (!std::isfinite(tl))
            throw NumericError("dropout head training diverged at epoch " +
                               std::to_string(e));
        double vl = eval_bce(head, feats_val);
        curve.train_loss.push_back(tl);
        curve.val_loss.push_back(vl);
        if (vl < best - 1e-12) {
            best = vl;
            best_flat = params_flatten(head);
            curve.best_epoch = e;
            bad = 0;
        } else if (++bad >= cfg.patience) {
            break;
        }
    }
    if (best_flat.numel() > 0) params_load(head, best_flat);
    return curve;
}

}  // namespace

void cmd_train_head(const RunConfig& cfg) {
    config_validate(cfg);
    PresetTraits traits = preset_traits(cfg.preset);
    SplitPaths sp = split_paths(cfg);
    RunPaths paths = run_paths(cfg);
    fs::create_directories(cfg.out_dir);
    Dataset train = dataset_from_records(load_split(sp.train, "train"));
    Dataset val = dataset_from_records(load_split(sp.val_id, "val_id"));

    if (traits.frozen_encoder) {
        EncoderArtifact enc = encoder_load(paths);
        std::uint64_t hash_before = network_param_hash(enc.net);
        Dataset feats_train = features_of(enc.net, train);
        Dataset feats_val = features_of(enc.net, val);

        RngStream init = derive_stream(cfg.seed, "ssn-init");
        SsnHead head = build_ssn_head(cfg, init);
        TrainCurve curve = train_ssn_head(head, feats_train, feats_val, cfg);
        tensor_write(ssn_params_flatten(head), paths.head_ssn);
        write_loss_csv(paths.loss_head, curve);

        if (traits.has_dropout_head) {
            RngStream dinit = derive_stream(cfg.seed, "dropout-init");
            Network dhead = build_dropout_head(cfg, dinit);
            TrainCurve dcurve = train_dropout_head(dhead, feats_train, feats_val, cfg);
            checkpoint_save(dhead, paths.head_dropout);
            write_loss_csv(paths.loss_dropout, dcurve);
        }
        if (network_param_hash(enc.net) != hash_before)
            throw NumericError("frozen encoder parameters changed during head training");
    }
    if (traits.has_unet) {
        RngStream uinit = derive_stream(cfg.seed, "unet-init");
        Network unet = build_unet(cfg, /*with_dropout=*/true, uinit);
        TrainCurve curve = train_plain(unet, train, val, cfg.head_epochs, cfg.lr_head,
                                       cfg.momentum, cfg.patience,
                                       sub_seed(cfg.seed, "unet-train"));
        checkpoint_save(unet, paths.head_unet);
        write_loss_csv(traits.frozen_encoder ? paths.loss_unet : paths.loss_head, curve);
    }
    run_json_write(cfg, "train-head", paths.run_json);
}

void cmd_fit_laplace(const RunConfig& cfg) {
    config_validate(cfg);
    PresetTraits traits = preset_traits(cfg.preset);
    if (!traits.has_ssn)
        throw ConfigError("preset " + cfg.preset + " has no Gaussian head to fit");
    RunPaths paths = run_paths(cfg);
    SplitPaths sp = split_paths(cfg);
    EncoderArtifact enc = encoder_load(paths);
    require_file(paths.head_ssn, "train-head");
    RngStream init = derive_stream(cfg.seed, "ssn-init");
    SsnHead head = build_ssn_head(cfg, init);
    ssn_params_load(head, tensor_read(paths.head_ssn));

    HeadPosterior post;
    if (traits.has_laplace) {
        Dataset train = dataset_from_records(load_split(sp.train, "train"));
        RngStream fr = derive_stream(cfg.seed, "fisher");
        int p = static_cast<int>(ssn_param_count(head));
        int k = std::min(cfg.fisher_rank, p - 1);
        post = fit_hessian(head, enc.net, train, HessianMode::LowRank, k,
                           cfg.lambda_grid.front(), cfg.t_inner, fr);
        Dataset val = dataset_from_records(load_split(sp.val_id, "val_id"));
        if (val.size() > 10) val.resize(10);
        RngStream tr = derive_stream(cfg.seed, "tune");
        tune_prior(post, head, enc.net, val, cfg.lambda_grid, 64, tr);
    } else {
        // degenerate posterior: parameters pinned at the MAP estimate
        post.theta_map = ssn_params_flatten(head);
        post.mode = HessianMode::Diag;
        post.fisher_diag = Tensor({post.theta_map.numel()}, 0.0f);
        post.prior_precision = 1e8;
    }
    posterior_save(post, paths.posterior);
    run_json_write(cfg, "fit-laplace", paths.run_json);
}

void cmd_calibrate(const RunConfig& cfg) {
    config_validate(cfg);
    RunPaths paths = run_paths(cfg);
    Artifacts art = load_artifacts(cfg, /*need_posterior=*/true, /*need_cal=*/false);
    SplitPaths sp = split_paths(cfg);
    std::vector<SampleRecord> val_id = load_split(sp.val_id, "val_id");
    std::vector<SampleRecord> val_ood = load_split(sp.val_ood, "val_ood");

    // Candidate keys are scored exactly as they would be deployed: for a
    // two-path model each (measure, source) names the fused score with that
    // auxiliary choice; for a single-path model each measure names its raw
    // map on the primary path.
    std::vector<CalItem> items;
    auto add_items = [&](const std::vector<SampleRecord>& recs, bool ood,
                         const char* split) {
        for (std::size_t i = 0; i < recs.size(); ++i) {
            StackSet stacks = build_stacks(cfg, art, recs[i].image,
                                           std::string("cal/") + split, i);
            CalItem item;
            item.is_ood = ood;
            if (stacks.has_l && stacks.has_d) {
                for (Measure M : kAuxMeasures)
                    for (PathId src : {PathId::L, PathId::D, PathId::Inter})
                        item.maps[MeasureKey{M, src}] =
                            fuse(stacks.l, stacks.d, M, src).fused;
            } else {
                const PredictiveStack& prim = primary_stack(stacks, art.traits);
                UncertaintyMaps maps = uncertainty_maps(prim, art.traits.primary);
                for (Measure M : kAuxMeasures)
                    item.maps[MeasureKey{M, art.traits.primary}] = maps.maps.at(M);
            }
            items.push_back(std::move(item));
        }
    };
    add_items(val_id, false, "val_id");
    add_items(val_ood, true, "val_ood");

    Reduction red = cfg.score_reduction == "topk" ? Reduction::TopkMean : Reduction::Mean;
    Calibration c = calibrate(items, red, cfg.score_q);
    CalibrationRecord rec;
    rec.measure = c.best.measure;
    rec.path = c.best.path;
    rec.m = cfg.m;
    rec.n_id = val_id.size();
    rec.n_ood = val_ood.size();
    rec.table = c.table;
    calibration_save(rec, paths.calibration);
    run_json_write(cfg, "calibrate", paths.run_json);
}

namespace {

// Per-frame 2-D views of a (T, H, W) or (H, W) mask.
std::vector<Tensor> mask_frames(const Tensor& mask) {
    if (mask.ndim() == 2) return {mask};
    std::size_t T = mask.extent(0), h = mask.extent(1), w = mask.extent(2);
    std::vector<Tensor> out;
    for (std::size_t t = 0; t < T; ++t) {
        Tensor f({h, w}, 0.0f);
        std::memcpy(f.data(), mask.data() + t * h * w, h * w * sizeof(float));
        out.push_back(std::move(f));
    }
    return out;
}

}  // namespace

void cmd_eval_seg(const RunConfig& cfg) {
    config_validate(cfg);
    RunPaths paths = run_paths(cfg);
    Artifacts art = load_artifacts(cfg, /*need_posterior=*/false, /*need_cal=*/false);
    SplitPaths sp = split_paths(cfg);
    std::vector<SampleRecord> test = load_split(sp.test_id, "test_id");
    if (test.empty()) throw DataError("test split is empty");

    std::vector<SegScores> rows;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const SampleRecord& rec = test[i];
        Tensor pred = threshold_mask(deterministic_logits(art, rec.image));
        Tensor truth = binary_truth(rec);
        std::vector<Tensor> pf = mask_frames(pred);
        std::vector<Tensor> tf = mask_frames(truth);
        for (std::size_t t = 0; t < pf.size(); ++t) {
            SegScores s;
            s.sample_id = sample_name(i);
            if (pf.size() > 1) {
                char suffix[12];
                std::snprintf(suffix, sizeof(suffix), "_f%02zu", t);
                s.sample_id += suffix;
            }
            s.cls = 1;
            s.dice = dice(pf[t], tf[t]);
            s.iou = iou(pf[t], tf[t]);
            bool pe = true, te = true;
            for (std::size_t k = 0; k < pf[t].numel() && (pe || te); ++k) {
                if (pf[t][k] > 0.5f) pe = false;
                if (tf[t][k] > 0.5f) te = false;
            }
            if (pe || te) {
                // no boundary to compare against: charge the image diagonal
                s.hd_mm = rec.spacing * std::hypot(static_cast<double>(cfg.image_size),
                                                   static_cast<double>(cfg.image_size));
                double cp = pe ? 0.0 : contour_length(pf[t], rec.spacing);
                double ct = te ? 0.0 : contour_length(tf[t], rec.spacing);
                s.ad_mm = std::fabs(cp - ct);
            } else {
                s.hd_mm = hausdorff(pf[t], tf[t], rec.spacing);
                s.ad_mm = abs_diff(pf[t], tf[t], rec.spacing);
            }
            rows.push_back(std::move(s));
        }
    }
    write_metric_report_csv(paths.eval_seg_csv, rows);
    std::map<std::string, SummaryStats> stats;
    std::vector<double> d, j, h, a;
    for (const SegScores& s : rows) {
        d.push_back(s.dice);
        j.push_back(s.iou);
        h.push_back(s.hd_mm);
        a.push_back(s.ad_mm);
    }
    stats["dice"] = summarize(d);
    stats["iou"] = summarize(j);
    stats["hd_mm"] = summarize(h);
    stats["ad_mm"] = summarize(a);
    write_summary_json(paths.eval_seg_json, stats);
    {
        std::FILE* f = std::fopen(paths.eval_seg_summary.c_str(), "wb");
        if (!f) throw DataError("cannot open " + paths.eval_seg_summary + " for writing");
        std::fprintf(f, "metric,mean,std,p25,p75\n");
        for (const char* name : {"dice", "iou", "hd_mm", "ad_mm"}) {
            const SummaryStats& s = stats[name];
            std::fprintf(f, "%s,%.6f,%.6f,%.6f,%.6f\n", name, s.mean, s.stddev, s.p25,
                         s.p75);
        }
        std::fclose(f);
    }
    run_json_write(cfg, "eval-seg", paths.run_json);
}

void cmd_eval_ood(const RunConfig& cfg) {
    config_validate(cfg);
    RunPaths paths = run_paths(cfg);
    Artifacts art = load_artifacts(cfg, /*need_posterior=*/preset_traits(cfg.preset).has_ssn,
                                   /*need_cal=*/true);
    SplitPaths sp = split_paths(cfg);
    std::vector<SampleRecord> test_id = load_split(sp.test_id, "test_id");
    std::vector<SampleRecord> test_ood = load_split(sp.test_ood, "test_ood");
    Reduction red = cfg.score_reduction == "topk" ? Reduction::TopkMean : Reduction::Mean;

    const char* groups[3] = {"individual", "intra", "inter"};
    // scores[group][measure] -> per-image scores, then labels
    std::vector<std::vector<std::vector<double>>> scores(
        3, std::vector<std::vector<double>>(5));
    std::vector<int> labels;

    auto add_split = [&](const std::vector<SampleRecord>& recs, bool ood,
                         const char* split) {
        for (std::size_t i = 0; i < recs.size(); ++i) {
            StackSet stacks = build_stacks(cfg, art, recs[i].image,
                                           std::string("eval/") + split, i);
            const PredictiveStack& prim = primary_stack(stacks, art.traits);
            UncertaintyMaps prim_maps = uncertainty_maps(prim, art.traits.primary);
            labels.push_back(ood ? 1 : 0);
            for (int mi = 0; mi < 4; ++mi)
                scores[0][mi].push_back(
                    image_score(prim_maps.maps.at(kAuxMeasures[mi]), red, cfg.score_q));
            // a single path fused against itself carries no signal
            scores[0][4].push_back(0.0);

            PredictiveStack h1, h2;
            split_halves(prim, h1, h2);
            for (int mi = 0; mi < 4; ++mi)
                scores[1][mi].push_back(image_score(
                    fuse(h1, h2, kAuxMeasures[mi], PathId::Inter).fused, red,
                    cfg.score_q));
            scores[1][4].push_back(image_score(
                fuse(h1, h2, art.cal.measure, PathId::Inter).fused, red, cfg.score_q));

            if (art.traits.two_path) {
                for (int mi = 0; mi < 4; ++mi)
                    scores[2][mi].push_back(image_score(
                        fuse(stacks.l, stacks.d, kAuxMeasures[mi], PathId::Inter)
                            .fused,
                        red, cfg.score_q));
                scores[2][4].push_back(image_score(
                    fuse(stacks.l, stacks.d, art.cal.measure, art.cal.path).fused,
                    red, cfg.score_q));
            }
        }
    };
    add_split(test_id, false, "test_id");
    add_split(test_ood, true, "test_ood");

    OodTable table;
    table.n_id = test_id.size();
    table.n_ood = test_ood.size();
    for (int g = 0; g < 3; ++g)
        for (int mi = 0; mi < 5; ++mi) {
            OodCell cell;
            cell.group = groups[g];
            cell.measure = kMeasureTags[mi];
            if (scores[g][mi].empty()) {
                cell.auc = std::numeric_limits<double>::quiet_NaN();
            } else {
                bool constant = true;
                for (double v : scores[g][mi])
                    if (v != scores[g][mi].front()) constant = false;
                cell.auc = constant ? 0.5 : auroc(scores[g][mi], labels);
            }
            table.cells.push_back(cell);
        }
    write_ood_table(table, paths, cfg);
    run_json_write(cfg, "eval-ood", paths.run_json);
}

void cmd_infer(const RunConfig& cfg, const std::string& image_path,
               const std::string& mask_path) {
    config_validate(cfg);
    RunPaths paths = run_paths(cfg);
    bool needs_post = preset_traits(cfg.preset).has_ssn;
    bool has_cal_file = fs::exists(paths.calibration);
    Artifacts art = load_artifacts(cfg, needs_post, /*need_cal=*/false);
    if (has_cal_file) {
        art.cal = calibration_load(paths.calibration);
        art.has_cal = true;
    }
    Tensor image = tensor_read(image_path);
    if (image.ndim() < 3 || image.extent(0) != 1)
        throw DataError("infer: expected a (1, H, W) or (1, T, H, W) image tensor");

    fs::create_directories(paths.infer_dir);
    fs::path out(paths.infer_dir);

    Tensor logits = deterministic_logits(art, image);
    Tensor pred = threshold_mask(logits);
    tensor_write(pred, (out / "mask.lft").string());
    {
        // flatten any leading frame axis for the preview image
        Tensor flat2d = pred.ndim() == 2
                            ? pred
                            : pred.reshaped({pred.numel() / pred.extent(pred.ndim() - 1),
                                             pred.extent(pred.ndim() - 1)});
        write_pgm(flat2d, (out / "mask.pgm").string());
    }

    StackSet stacks = build_stacks(cfg, art, image, "infer", 0);
    json scores = json::object();
    auto dump_maps = [&](const PredictiveStack& s, PathId pid) {
        UncertaintyMaps maps = uncertainty_maps(s, pid);
        for (const auto& [M, map] : maps.maps) {
            std::string stem = "map_" + measure_tag(M) + "_" + path_tag(pid);
            tensor_write(map, (out / (stem + ".lft")).string());
            Tensor flat2d =
                map.ndim() == 2
                    ? map
                    : map.reshaped({map.numel() / map.extent(map.ndim() - 1),
                                    map.extent(map.ndim() - 1)});
            write_pgm(flat2d, (out / (stem + ".pgm")).string());
            Reduction red =
                cfg.score_reduction == "topk" ? Reduction::TopkMean : Reduction::Mean;
            scores[measure_tag(M) + "_" + path_tag(pid)] =
                image_score(map, red, cfg.score_q);
        }
    };
    if (stacks.has_l) dump_maps(stacks.l, PathId::L);
    if (stacks.has_d) dump_maps(stacks.d, PathId::D);
    if (stacks.has_l && stacks.has_d) {
        Measure aux = art.has_cal ? art.cal.measure : Measure::EE;
        PathId aux_src = art.has_cal ? art.cal.path : PathId::Inter;
        FuseResult fr = fuse(stacks.l, stacks.d, aux, aux_src);
        tensor_write(fr.fused, (out / "map_fused_inter.lft").string());
        write_pgm(fr.fused, (out / "map_fused_inter.pgm").string());
        Reduction red =
            cfg.score_reduction == "topk" ? Reduction::TopkMean : Reduction::Mean;
        scores["fused_inter"] = image_score(fr.fused, red, cfg.score_q);
    }

    const PredictiveStack& cf_src = stacks.has_d ? stacks.d : stacks.l;
    std::vector<Tensor> cfs = counterfactuals(cf_src, pred, cfg.cf_min_diff);
    std::size_t n_cf = std::min<std::size_t>(cfs.size(), static_cast<std::size_t>(cfg.m));
    for (std::size_t k = 0; k < n_cf; ++k) {
        char name[40];
        std::snprintf(name, sizeof(name), "counterfactual_%02zu.pgm", k);
        Tensor flat2d =
            cfs[k].ndim() == 2
                ? cfs[k]
                : cfs[k].reshaped({cfs[k].numel() / cfs[k].extent(cfs[k].ndim() - 1),
                                   cfs[k].extent(cfs[k].ndim() - 1)});
        write_pgm(flat2d, (out / name).string());
    }

    json j;
    j["image"] = image_path;
    j["n_counterfactuals"] = n_cf;
    j["scores"] = scores;
    if (!mask_path.empty()) {
        Tensor truth = tensor_read(mask_path);
        if (truth.numel() != pred.numel())
            throw DataError("infer: ground-truth mask does not match the image extent");
        Tensor bin(truth.shape(), 0.0f);
        bool multi = false;
        for (std::size_t i = 0; i < truth.numel(); ++i)
            if (truth[i] > 1.0f) multi = true;
        for (std::size_t i = 0; i < truth.numel(); ++i)
            bin[i] = multi ? (truth[i] >= 2.0f ? 1.0f : 0.0f) : truth[i];
        j["dice"] = dice(pred.reshaped(bin.shape()), bin);
    }
    write_text((out / "infer.json").string(), j.dump(2) + "\n");
    run_json_write(cfg, "infer", paths.run_json);
}

void cmd_bench(const RunConfig& cfg) {
    config_validate(cfg);
    RunPaths paths = run_paths(cfg);
    Artifacts art = load_artifacts(cfg, preset_traits(cfg.preset).has_ssn,
                                   /*need_cal=*/false);
    PhantomKind kind = parse_kind(cfg.kind);
    SampleRecord rec = gen_phantom(cfg, kind, sub_seed(cfg.seed, "bench"));
    if (cfg.clip_frames > 0)
        rec = gen_clip(rec, cfg.clip_frames, MotionConfig{},
                       sub_seed(cfg.seed, "bench/clip"));

    int iters = std::max(100, cfg.bench_iters);
    int warmup = cfg.bench_warmup;
    volatile double sink = 0.0;

    auto run_seg = [&]() {
        Tensor mask = threshold_mask(deterministic_logits(art, rec.image));
        double s = 0;
        for (std::size_t i = 0; i < mask.numel(); ++i) s += mask[i];
        sink = sink + s;
    };
    RunConfig map_cfg = cfg;
    map_cfg.m = 20;
    map_cfg.n_inner = 1;
    std::uint64_t tick = 0;
    auto run_maps = [&]() {
        StackSet stacks = build_stacks(map_cfg, art, rec.image, "bench-maps", tick++);
        const PredictiveStack& prim = primary_stack(stacks, art.traits);
        UncertaintyMaps maps = uncertainty_maps(prim, art.traits.primary);
        sink = sink + image_score(maps.maps.at(Measure::EE), Reduction::Mean, 0.05);
    };

    json report = json::array();
    struct ModeSpec {
        const char* name;
        int n_samples;
        std::function<void()> fn;
    };
    std::vector<ModeSpec> modes = {{"segmentation", 1, run_seg}, {"maps", 20, run_maps}};
    for (const ModeSpec& mode : modes) {
        for (int i = 0; i < warmup; ++i) mode.fn();
        auto t0 = std::chrono::steady_clock::now();
        for (int i = 0; i < iters; ++i) mode.fn();
        auto t1 = std::chrono::steady_clock::now();
        double secs = std::chrono::duration<double>(t1 - t0).count();
        json entry;
        entry["mode"] = mode.name;
        entry["fps"] = static_cast<double>(iters) / secs;
        entry["n_samples"] = mode.n_samples;
        entry["image_size"] = cfg.image_size;
        entry["iterations"] = iters;
        report.push_back(entry);
    }
    fs::create_directories(cfg.out_dir);
    write_text(paths.bench_json, report.dump(2) + "\n");
    run_json_write(cfg, "bench", paths.run_json);
}

}  // namespace lfusion
