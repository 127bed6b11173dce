#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lfusion/autonet.hpp"
#include "lfusion/laplace.hpp"
#include "lfusion/ssn.hpp"
#include "lfusion/synthdata.hpp"
#include "lfusion/uncertainty.hpp"

namespace lfusion {

// Experiment orchestration: declarative run configuration, artifact layout,
// and the CLI commands. Every command is a pure function of the resolved
// config plus the artifacts already on disk; rerunning a command rewrites
// byte-identical numeric outputs.

struct RunConfig {
    std::string preset = "lfusion";  // ssn | dropout_unet | laplace_unet |
                                     // lfusion | c1 | c2
    std::string kind = "head";       // phantom family: head | heart
    std::size_t image_size = 64;
    int classes = 0;  // logit channels; 0 = single foreground logit (heart
                      // phantom labels are collapsed to organ-vs-rest)
    int clip_frames = 0;  // 0 = single-frame mode; >0 = clip mode

    // sampling
    int m = 50;        // outer draws (posterior / dropout passes)
    int n_inner = 5;   // logit draws per outer sample on the Gaussian head
    int rank = 10;     // low-rank logit covariance rank
    int fisher_rank = 10;  // Laplace low-rank curvature rank
    double dropout = 0.2;
    std::vector<double> lambda_grid = {0.1, 1.0, 10.0, 100.0};

    // training
    int encoder_epochs = 25;
    int head_epochs = 40;
    double lr_encoder = 5e-6;
    double lr_head = 5e-6;
    double momentum = 0.9;
    int patience = 20;  // early stopping on validation loss
    int t_inner = 10;   // Monte-Carlo samples in the marginal likelihood

    // data
    int n_train = 200;
    int n_val = 50;  // per half: n_val in-distribution + n_val OOD
    int n_test = 50;
    double ood_alpha = 15.0;
    double ood_sigma = 8.0;

    // scoring
    std::string score_reduction = "mean";  // mean | topk
    double score_q = 0.05;
    double cf_min_diff = 0.05;  // counterfactual disagreement threshold

    // bench
    int bench_iters = 100;
    int bench_warmup = 10;

    std::uint64_t seed = 0;
    unsigned jobs = 1;
    std::string data_dir = "data";
    std::string out_dir = "out";
};

// Line-oriented `key = value` text; '#' starts a comment; unknown keys are
// ConfigErrors. Environment variables LFUSION_<KEY> (upper-case key) override
// file values; explicit CLI flags override both.
RunConfig config_defaults();
RunConfig config_parse_file(const std::string& path);
void config_set(RunConfig& cfg, const std::string& key, const std::string& value);
void config_apply_env(RunConfig& cfg);
void config_validate(const RunConfig& cfg);

// Resolved-config snapshot; every command writes one into out_dir. A config
// read back from run.json re-executes the identical run.
void run_json_write(const RunConfig& cfg, const std::string& command,
                    const std::string& path);
RunConfig run_json_read(const std::string& path);

// True when the path looks like a run.json snapshot rather than key=value text.
bool config_path_is_json(const std::string& path);

int resolved_classes(const RunConfig& cfg);

struct RunPaths {
    std::string run_json;
    std::string encoder;        // frozen trunk checkpoint (LFC1)
    std::string encoder_meta;   // frozen flag + parameter hash (JSON)
    std::string loss_encoder;   // per-epoch CSV
    std::string head_ssn;       // flat Gaussian-head parameters (LFT1)
    std::string loss_head;
    std::string head_dropout;   // dropout head checkpoint (LFC1)
    std::string loss_dropout;
    std::string head_unet;      // standalone dropout net checkpoint (LFC1)
    std::string loss_unet;
    std::string posterior;      // Laplace posterior (LFP1)
    std::string calibration;    // chosen measure record (JSON)
    std::string eval_seg_csv;
    std::string eval_seg_summary;  // per-metric mean/std/p25/p75 table
    std::string eval_seg_json;
    std::string eval_ood_csv;
    std::string eval_ood_json;
    std::string bench_json;
    std::string infer_dir;
};
RunPaths run_paths(const RunConfig& cfg);

struct SplitPaths {
    std::string train, val_id, val_ood, test_id, test_ood;
};
SplitPaths split_paths(const RunConfig& cfg);

// Architecture builders. The encoder is four convolution blocks at strides
// 2,2,2,1 with channels 16-32-64-64, so features live at 1/8 resolution;
// heads upsample back to the input grid.
std::vector<LayerSpec> encoder_specs(bool clip);
std::vector<LayerSpec> decoder_specs(int in_channels, int classes, double dropout_rate,
                                     bool clip);
SsnHead build_ssn_head(const RunConfig& cfg, RngStream& init);
Network build_dropout_head(const RunConfig& cfg, RngStream& init);
// Full standalone net = encoder specs + decoder specs in one network.
Network build_unet(const RunConfig& cfg, bool with_dropout, RngStream& init);
// Splits a standalone net back into (deterministic trunk, stochastic head).
void split_unet(const Network& full, Network& trunk, Network& head);

// Frozen-encoder artifact. Training entry points must call require_trainable
// first; a frozen checkpoint is rejected for further gradient updates.
struct EncoderArtifact {
    Network net;
    bool frozen = false;
    std::uint64_t param_hash = 0;
    double train_dice = 0.0;  // of the full pretraining net, for smoke checks
};
void encoder_save(const EncoderArtifact& enc, const RunPaths& paths);
EncoderArtifact encoder_load(const RunPaths& paths);
void require_trainable(const EncoderArtifact& enc);
std::uint64_t network_param_hash(const Network& net);

// Plain supervised training of a full network with pixel-summed sigmoid
// cross-entropy, SGD with momentum, and early stopping on validation loss;
// returns per-epoch train/val losses and leaves the best-validation
// parameters (and batchnorm statistics) loaded.
struct TrainCurve {
    std::vector<double> train_loss;
    std::vector<double> val_loss;
    int best_epoch = -1;
};
TrainCurve train_plain(Network& net, const Dataset& train, const Dataset& val,
                       int epochs, double lr, double momentum, int patience,
                       std::uint64_t seed);

void write_loss_csv(const std::string& path, const TrainCurve& curve);

// Measure table for OOD evaluation: {individual, intra, inter} groups
// crossed with the four raw measures plus the calibrated fusion.
struct OodCell {
    std::string group;    // individual | intra | inter
    std::string measure;  // ee | mi | epkl | pv | fused
    double auc = 0.0;
};
struct OodTable {
    std::vector<OodCell> cells;  // fixed 15-cell order, nan where undefined
    std::size_t n_id = 0;
    std::size_t n_ood = 0;
};
void write_ood_table(const OodTable& table, const RunPaths& paths,
                     const RunConfig& cfg);

// Calibration record: best-scoring auxiliary measure on validation.
struct CalibrationRecord {
    Measure measure = Measure::EE;
    PathId path = PathId::L;
    int m = 0;
    std::size_t n_id = 0;
    std::size_t n_ood = 0;
    std::vector<AucRow> table;
};
void calibration_save(const CalibrationRecord& rec, const std::string& path);
CalibrationRecord calibration_load(const std::string& path);

// Commands (CLI verbs map one-to-one).
void cmd_synth(const RunConfig& cfg);
void cmd_pretrain_encoder(const RunConfig& cfg);
void cmd_train_head(const RunConfig& cfg);
void cmd_fit_laplace(const RunConfig& cfg);
void cmd_calibrate(const RunConfig& cfg);
void cmd_eval_seg(const RunConfig& cfg);
void cmd_eval_ood(const RunConfig& cfg);
void cmd_infer(const RunConfig& cfg, const std::string& image_path,
               const std::string& mask_path = "");
void cmd_bench(const RunConfig& cfg);

}  // namespace lfusion
