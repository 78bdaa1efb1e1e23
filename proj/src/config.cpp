#include "softforge/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "softforge/errors.hpp"

namespace softforge {

using nlohmann::json;

long ModelConfig::parameter_count() const {
    const long d = d_model, v = vocab_size, f = ffn_hidden;
    const long per_block = 4 * d * d + 3 * d * f + 2 * d;
    return v * d + n_blocks * per_block + d + d * v;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (vocab_size < 2) fail("vocab_size must be >= 2");
    if (n_blocks < 1) fail("n_blocks must be >= 1");
    if (max_seq_len < 1) fail("max_seq_len must be >= 1");
    if (d_model < 1 || n_heads < 1) fail("d_model and n_heads must be positive");
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) fail("head dimension must be even for rotary embedding");
    if (ffn_hidden < 1) fail("ffn_hidden must be >= 1");
    if (!(rms_eps > 0.0f)) fail("rms_eps must be > 0");
    if (!(rope_base > 0.0f)) fail("rope_base must be > 0");
}

ExitSet ExitSet::validated(std::vector<int> depths, int n_blocks) {
    if (depths.empty()) throw ConfigError("exit set: must not be empty");
    for (size_t i = 0; i < depths.size(); ++i) {
        if (depths[i] < 1 || depths[i] > n_blocks)
            throw ConfigError("exit set: depth " + std::to_string(depths[i]) +
                              " outside [1, " + std::to_string(n_blocks) + "]");
        if (i > 0 && depths[i] <= depths[i - 1])
            throw ConfigError("exit set: depths must be strictly ascending");
    }
    if (depths.back() != n_blocks)
        throw ConfigError("exit set: deepest exit must equal n_blocks (" +
                          std::to_string(n_blocks) + ")");
    ExitSet s;
    s.depths_ = std::move(depths);
    return s;
}

bool ExitSet::contains(int n) const {
    return std::binary_search(depths_.begin(), depths_.end(), n);
}

int ExitSet::index_of(int n) const {
    auto it = std::lower_bound(depths_.begin(), depths_.end(), n);
    if (it == depths_.end() || *it != n) return -1;
    return static_cast<int>(it - depths_.begin());
}

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::soft_sum: return "soft";
        case TrainMode::soft_sampled: return "soft-sampled";
        case TrainMode::sft: return "sft";
    }
    return "?";
}

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "soft") return TrainMode::soft_sum;
    if (s == "soft-sampled") return TrainMode::soft_sampled;
    if (s == "sft") return TrainMode::sft;
    throw ConfigError("unknown training mode '" + s + "' (expected soft, soft-sampled, or sft)");
}

std::vector<double> TrainConfig::resolved_weights(size_t n_exits) const {
    if (exit_weights.empty()) return std::vector<double>(n_exits, 1.0);
    return exit_weights;
}

void TrainConfig::validate(size_t n_exits) const {
    auto fail = [](const std::string& msg) { throw ConfigError("train config: " + msg); };
    if (!(learning_rate > 0.0)) fail("learning_rate must be > 0");
    if (epochs < 1) fail("epochs must be >= 1");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (grad_accum_steps < 1) fail("grad_accum_steps must be >= 1");
    if (max_steps < 0) fail("max_steps must be >= 0");
    if (val_interval < 0) fail("val_interval must be >= 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) fail("adam_beta1 must be in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) fail("adam_beta2 must be in [0, 1)");
    if (adam_eps < 0.0) fail("adam_eps must be >= 0");
    const auto w = resolved_weights(n_exits);
    if (w.size() != n_exits) fail("exit_weights length must match the exit set");
    double total = 0.0;
    for (double x : w) {
        if (x < 0.0) fail("exit_weights must be non-negative");
        total += x;
    }
    if (total == 0.0) fail("exit_weights must not all be zero");
}

namespace {

void require_keys(const json& obj, const std::set<std::string>& allowed,
                  const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (allowed.find(it.key()) == allowed.end())
            throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

template <typename T>
T get_or(const json& obj, const std::string& key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("key '" + key + "': " + e.what());
    }
}

ModelConfig parse_model(const json& obj) {
    require_keys(obj, {"vocab_size", "d_model", "n_heads", "n_blocks", "ffn_hidden",
                       "max_seq_len", "rms_eps", "rope_base"}, "model");
    ModelConfig m;
    m.vocab_size = get_or(obj, "vocab_size", m.vocab_size);
    m.d_model = get_or(obj, "d_model", m.d_model);
    m.n_heads = get_or(obj, "n_heads", m.n_heads);
    m.n_blocks = get_or(obj, "n_blocks", m.n_blocks);
    m.ffn_hidden = get_or(obj, "ffn_hidden", m.ffn_hidden);
    m.max_seq_len = get_or(obj, "max_seq_len", m.max_seq_len);
    m.rms_eps = get_or(obj, "rms_eps", m.rms_eps);
    m.rope_base = get_or(obj, "rope_base", m.rope_base);
    m.validate();
    return m;
}

TrainConfig parse_train(const json& obj) {
    require_keys(obj, {"learning_rate", "epochs", "batch_size", "mode", "exit_weights",
                       "adam_beta1", "adam_beta2", "adam_eps", "grad_accum_steps",
                       "mask_prompt", "max_steps", "val_interval"}, "train");
    TrainConfig t;
    t.learning_rate = get_or(obj, "learning_rate", t.learning_rate);
    t.epochs = get_or(obj, "epochs", t.epochs);
    t.batch_size = get_or(obj, "batch_size", t.batch_size);
    if (obj.contains("mode")) t.mode = train_mode_from_string(obj.at("mode").get<std::string>());
    t.exit_weights = get_or(obj, "exit_weights", t.exit_weights);
    t.adam_beta1 = get_or(obj, "adam_beta1", t.adam_beta1);
    t.adam_beta2 = get_or(obj, "adam_beta2", t.adam_beta2);
    t.adam_eps = get_or(obj, "adam_eps", t.adam_eps);
    t.grad_accum_steps = get_or(obj, "grad_accum_steps", t.grad_accum_steps);
    t.mask_prompt = get_or(obj, "mask_prompt", t.mask_prompt);
    t.max_steps = get_or(obj, "max_steps", t.max_steps);
    t.val_interval = get_or(obj, "val_interval", t.val_interval);
    return t;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text, const std::string& origin) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    require_keys(root, {"schema_version", "seed", "output_dir", "model", "exits",
                        "train", "data"}, origin);
    RunConfig rc;
    rc.schema_version = get_or(root, "schema_version", 1);
    if (rc.schema_version != 1)
        throw ConfigError(origin + ": unsupported schema_version " +
                          std::to_string(rc.schema_version));
    rc.seed = get_or<uint64_t>(root, "seed", 0);
    rc.output_dir = get_or<std::string>(root, "output_dir", "");
    if (root.contains("model")) rc.model = parse_model(root.at("model"));
    if (root.contains("exits")) rc.exit_depths = root.at("exits").get<std::vector<int>>();
    if (rc.exit_depths.empty()) rc.exit_depths = {rc.model.n_blocks};
    if (root.contains("train")) rc.train = parse_train(root.at("train"));
    rc.train.seed = rc.seed;
    if (root.contains("data")) {
        const json& d = root.at("data");
        require_keys(d, {"train", "val", "instructions"}, "data");
        rc.data.train = get_or<std::string>(d, "train", "");
        rc.data.val = get_or<std::string>(d, "val", "");
        rc.data.instructions = get_or<std::string>(d, "instructions", "");
    }
    const ExitSet exits = rc.exits();  // validates depth list
    rc.train.validate(exits.size());
    return rc;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str(), path);
}

}  // namespace softforge
