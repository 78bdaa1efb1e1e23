#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace softforge {

struct ModelConfig {
    int vocab_size = 258;
    int d_model = 128;
    int n_heads = 4;
    int n_blocks = 8;
    int ffn_hidden = 256;
    int max_seq_len = 256;
    float rms_eps = 1e-5f;
    float rope_base = 10000.0f;

    int head_dim() const { return d_model / n_heads; }
    long parameter_count() const;
    void validate() const;  // throws ConfigError
};

// Strictly increasing exit depths; the deepest exit is always the full model.
class ExitSet {
public:
    ExitSet() = default;
    // Validates and constructs; throws ConfigError on violation.
    static ExitSet validated(std::vector<int> depths, int n_blocks);

    const std::vector<int>& depths() const { return depths_; }
    size_t size() const { return depths_.size(); }
    int full_depth() const { return depths_.back(); }
    bool contains(int n) const;
    // Index of depth n within the set, or -1.
    int index_of(int n) const;

private:
    std::vector<int> depths_;
};

enum class TrainMode { soft_sum, soft_sampled, sft };

std::string to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& s);  // throws ConfigError

struct TrainConfig {
    double learning_rate = 3e-4;
    int epochs = 1;
    int batch_size = 4;
    uint64_t seed = 0;
    TrainMode mode = TrainMode::soft_sum;
    std::vector<double> exit_weights;  // empty = all 1.0
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    int grad_accum_steps = 1;
    bool mask_prompt = true;
    // Optimizer-step cap; 0 means run the full epoch count.
    long max_steps = 0;
    // Validation cadence in optimizer steps; 0 means final evaluation only.
    long val_interval = 500;

    // Weights aligned with the exit set, defaulting to uniform 1.0.
    std::vector<double> resolved_weights(size_t n_exits) const;
    void validate(size_t n_exits) const;  // throws ConfigError
};

struct DataPaths {
    std::string train;
    std::string val;
    std::string instructions;
};

struct RunConfig {
    int schema_version = 1;
    uint64_t seed = 0;
    std::string output_dir;
    ModelConfig model;
    std::vector<int> exit_depths;
    TrainConfig train;
    DataPaths data;

    ExitSet exits() const { return ExitSet::validated(exit_depths, model.n_blocks); }
};

// Strict JSON loading: unknown keys are ConfigError, missing files are
// ConfigError naming the path.
RunConfig load_run_config(const std::string& path);
RunConfig parse_run_config(const std::string& json_text, const std::string& origin);

}  // namespace softforge
