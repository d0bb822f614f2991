#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ovformer/datasets.hpp"
#include "ovformer/losses.hpp"
#include "ovformer/model.hpp"
#include "ovformer/textbank.hpp"

namespace ovf {

enum class Freeze { None, Enc, Dec };

Freeze parse_freeze(const std::string& s);
const char* freeze_name(Freeze f);

struct TrainConfig {
    int stage = 1;
    int epochs = 1;
    double lr = 1e-3;
    int warmup_epochs = 0;
    int batch_size = 8;
    uint64_t seed = 0;
    double lambda = 1.0;
    Freeze freeze = Freeze::None;
    double grad_clip = 1.0;
    std::string active_vocab = "super";  // super | base
    int threads = 1;
    double alpha = 0.25;   // focal
    double gamma = 2.0;
    double center_ratio = 0.5;
    int max_seq_len = 0;  // 0: no windowing

    void validate(bool allow_zero_epochs) const;
};

struct EpochStats {
    double l_cls = 0.0;
    double l_reg = 0.0;
    double total = 0.0;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    double wall_seconds = 0.0;
    std::string final_checkpoint;
    uint64_t seed = 0;
    std::map<std::string, std::string> config_echo;
};

// Writes the line-oriented epoch log and a JSON summary next to it. Wall
// time goes to the text log only, so summaries stay bit-reproducible.
void write_train_report(const TrainReport& report, const std::string& base_path);

struct AdamState {
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
    int64_t step = 0;
};

// Scales all gradients so the global norm does not exceed clip; returns the
// pre-clip norm. clip <= 0 disables.
double clip_gradients(ModelParams& params, double clip);

// Decoupled-weight-decay adaptive-moment update (beta1 0.9, beta2 0.999,
// eps 1e-8, decay 1e-4; decay skipped on layer-norm gains/biases). Tensors
// matching `freeze` are left untouched entirely. NaN gradients abort.
void optimizer_step(ModelParams& params, AdamState& state, double lr_t, double grad_clip, Freeze freeze);

double lr_at_epoch(const TrainConfig& cfg, int epoch);

struct TrainResult {
    ModelParams params;
    TrainReport report;
};

// Stage I: fresh parameters on the large-vocabulary dataset.
TrainResult train_stage1(const std::vector<VideoFeatures>& data, const ClassEmbeddingTable& table,
                         const Vocabulary& vocab, const ModelConfig& mcfg, const TrainConfig& tcfg,
                         const std::string& out_dir);

// Stage II: continue from a checkpoint on the base dataset; freeze modes
// pin either component. epochs == 0 returns the loaded checkpoint as-is.
TrainResult finetune_stage2(const Checkpoint& init, const std::vector<VideoFeatures>& data,
                            const ClassEmbeddingTable& table, const Vocabulary& vocab, const TrainConfig& tcfg,
                            const std::string& out_dir);

}  // namespace ovf
