#include "ulact/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "ulact/binio.hpp"

namespace ulact {

namespace {

[[noreturn]] void config_error(const std::string& key, const std::string& detail) {
    throw std::invalid_argument("config: " + key + ": " + detail);
}

struct KeySpec {
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
    bool structural = false;
};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        config_error(key, "expected an integer, got '" + v + "'");
    }
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double x = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        config_error(key, "expected a number, got '" + v + "'");
    }
}

std::string fmt_real(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template <typename Field>
KeySpec int_key(Field RunConfig::* field, long long lo, long long hi, bool structural = false) {
    KeySpec spec;
    spec.structural = structural;
    spec.set = [field, lo, hi](RunConfig& cfg, const std::string& v) {
        // key name is re-supplied by the caller's error context via exceptions below
        const long long x = parse_int("value", v);
        if (x < lo || x > hi)
            throw std::out_of_range("value " + std::to_string(x) + " out of range [" +
                                    std::to_string(lo) + ", " + std::to_string(hi) + "]");
        cfg.*field = static_cast<Field>(x);
    };
    spec.get = [field](const RunConfig& cfg) { return std::to_string(cfg.*field); };
    return spec;
}

KeySpec real_key(double RunConfig::* field, double lo, double hi, bool structural = false) {
    KeySpec spec;
    spec.structural = structural;
    spec.set = [field, lo, hi](RunConfig& cfg, const std::string& v) {
        const double x = parse_real("value", v);
        if (!(x >= lo && x <= hi))
            throw std::out_of_range("value " + fmt_real(x) + " out of range [" + fmt_real(lo) +
                                    ", " + fmt_real(hi) + "]");
        cfg.*field = x;
    };
    spec.get = [field](const RunConfig& cfg) { return fmt_real(cfg.*field); };
    return spec;
}

KeySpec positive_real_key(double RunConfig::* field, double hi, bool structural = false) {
    KeySpec spec;
    spec.structural = structural;
    spec.set = [field, hi](RunConfig& cfg, const std::string& v) {
        const double x = parse_real("value", v);
        if (!(x > 0.0 && x <= hi))
            throw std::out_of_range("value " + fmt_real(x) + " out of range (0, " + fmt_real(hi) + "]");
        cfg.*field = x;
    };
    spec.get = [field](const RunConfig& cfg) { return fmt_real(cfg.*field); };
    return spec;
}

KeySpec string_key(std::string RunConfig::* field) {
    KeySpec spec;
    spec.set = [field](RunConfig& cfg, const std::string& v) { cfg.*field = v; };
    spec.get = [field](const RunConfig& cfg) { return cfg.*field; };
    return spec;
}

template <typename Enum>
KeySpec enum_key(Enum RunConfig::* field, std::vector<std::pair<std::string, Enum>> values,
                 bool structural = false) {
    KeySpec spec;
    spec.structural = structural;
    spec.set = [field, values](RunConfig& cfg, const std::string& v) {
        for (const auto& [name, e] : values)
            if (name == v) {
                cfg.*field = e;
                return;
            }
        std::string allowed;
        for (const auto& [name, e] : values) allowed += (allowed.empty() ? "" : ", ") + name;
        throw std::out_of_range("value '" + v + "' not one of {" + allowed + "}");
    };
    spec.get = [field, values](const RunConfig& cfg) {
        for (const auto& [name, e] : values)
            if (cfg.*field == e) return name;
        return std::string("?");
    };
    return spec;
}

KeySpec bool_key(bool RunConfig::* field) {
    KeySpec spec;
    spec.set = [field](RunConfig& cfg, const std::string& v) {
        if (v == "true" || v == "1")
            cfg.*field = true;
        else if (v == "false" || v == "0")
            cfg.*field = false;
        else
            throw std::out_of_range("value '" + v + "' not one of {true, false}");
    };
    spec.get = [field](const RunConfig& cfg) { return cfg.*field ? "true" : "false"; };
    return spec;
}

KeySpec seed_key(std::uint64_t RunConfig::* field) {
    KeySpec spec;
    spec.set = [field](RunConfig& cfg, const std::string& v) {
        try {
            std::size_t used = 0;
            const unsigned long long x = std::stoull(v, &used);
            if (used != v.size()) throw std::invalid_argument("");
            cfg.*field = x;
        } catch (...) {
            throw std::out_of_range("expected an unsigned integer, got '" + v + "'");
        }
    };
    spec.get = [field](const RunConfig& cfg) { return std::to_string(cfg.*field); };
    return spec;
}

// Ordered key table; the order defines the canonical config text.
const std::vector<std::pair<std::string, KeySpec>>& key_table() {
    static const std::vector<std::pair<std::string, KeySpec>> table = [] {
        std::vector<std::pair<std::string, KeySpec>> t;
        t.emplace_back("data.seed", seed_key(&RunConfig::seed));
        t.emplace_back("data.episodes", int_key(&RunConfig::episodes, 1, 100000));
        t.emplace_back("data.frame_size", int_key(&RunConfig::frame_size, 16, 128, true));
        t.emplace_back("data.horizon", int_key(&RunConfig::horizon, 1, 1000));
        t.emplace_back("world.max_step", positive_real_key(&RunConfig::max_step, 1.0));
        t.emplace_back("world.lift_threshold", positive_real_key(&RunConfig::lift_threshold, 1.0));
        t.emplace_back("latent.H", int_key(&RunConfig::temporal_offset, 1, 64, true));
        t.emplace_back("latent.N", int_key(&RunConfig::num_latents, 1, 64, true));
        t.emplace_back("latent.K", int_key(&RunConfig::codebook_entries, 2, 4096, true));
        t.emplace_back("latent.D", int_key(&RunConfig::latent_dim, 1, 1024, true));
        t.emplace_back("unilarn.layers", int_key(&RunConfig::larn_layers, 1, 16, true));
        t.emplace_back("unilarn.heads", int_key(&RunConfig::larn_heads, 1, 16, true));
        t.emplace_back("unilarn.width", int_key(&RunConfig::larn_width, 8, 1024, true));
        t.emplace_back("unilarn.patch", int_key(&RunConfig::larn_patch, 2, 16, true));
        t.emplace_back("unilarn.beta", positive_real_key(&RunConfig::beta, 10.0));
        t.emplace_back("unilarn.lr", positive_real_key(&RunConfig::larn_lr, 1.0));
        t.emplace_back("unilarn.steps", int_key(&RunConfig::larn_steps, 1, 1000000));
        t.emplace_back("unilarn.batch", int_key(&RunConfig::larn_batch, 1, 1024));
        t.emplace_back("unilarn.dead_code_steps", int_key(&RunConfig::dead_code_steps, 1, 1000000));
        t.emplace_back("unilarn.mode",
                       enum_key(&RunConfig::larn_mode,
                                {{"unified", LarnMode::unified},
                                 {"rgb_only", LarnMode::rgb_only},
                                 {"depth_only", LarnMode::depth_only}},
                                true));
        t.emplace_back("unilact.layers", int_key(&RunConfig::lact_layers, 1, 16, true));
        t.emplace_back("unilact.heads", int_key(&RunConfig::lact_heads, 1, 16, true));
        t.emplace_back("unilact.width", int_key(&RunConfig::lact_width, 8, 1024, true));
        t.emplace_back("unilact.visual_patch", int_key(&RunConfig::visual_patch, 2, 32, true));
        t.emplace_back("unilact.action_hidden", int_key(&RunConfig::action_hidden, 1, 1024, true));
        t.emplace_back("unilact.lr", positive_real_key(&RunConfig::lact_lr, 1.0));
        t.emplace_back("pretrain.steps", int_key(&RunConfig::pretrain_steps, 1, 1000000));
        t.emplace_back("pretrain.batch", int_key(&RunConfig::pretrain_batch, 1, 1024));
        t.emplace_back("pretrain.regime",
                       enum_key(&RunConfig::pretrain_regime, {{"cross", PretrainRegime::cross},
                                                              {"unified", PretrainRegime::unified}}));
        t.emplace_back("pretrain.multi_task", bool_key(&RunConfig::multi_task));
        t.emplace_back("finetune.steps", int_key(&RunConfig::finetune_steps, 1, 1000000));
        t.emplace_back("finetune.batch", int_key(&RunConfig::finetune_batch, 1, 1024));
        t.emplace_back("finetune.demos", int_key(&RunConfig::finetune_demos, 1, 100000));
        t.emplace_back("loss.lambda_mode",
                       enum_key(&RunConfig::lambda_mode, std::vector<std::pair<std::string, int>>{
                                                             {"sum", 0}, {"convex", 1}}));
        t.emplace_back("loss.lambda", real_key(&RunConfig::lambda, 0.0, 1.0));
        t.emplace_back("train.precision",
                       enum_key(&RunConfig::precision,
                                {{"f32", Precision::f32}, {"f64", Precision::f64}}));
        t.emplace_back("train.weight_decay", real_key(&RunConfig::weight_decay, 0.0, 1.0));
        t.emplace_back("eval.rollouts", int_key(&RunConfig::eval_rollouts, 1, 100000));
        t.emplace_back("eval.seed_base", seed_key(&RunConfig::eval_seed_base));
        t.emplace_back("probe.ridge_lambda", positive_real_key(&RunConfig::ridge_lambda, 1e6));
        t.emplace_back("probe.train_fraction", real_key(&RunConfig::probe_train_fraction, 0.05, 0.95));
        t.emplace_back("ablate.seeds", int_key(&RunConfig::ablate_seeds, 1, 64));
        t.emplace_back("ablate.unilarn_steps", int_key(&RunConfig::ablate_larn_steps, 1, 1000000));
        t.emplace_back("ablate.pretrain_steps", int_key(&RunConfig::ablate_pretrain_steps, 1, 1000000));
        t.emplace_back("ablate.finetune_steps", int_key(&RunConfig::ablate_finetune_steps, 1, 1000000));
        t.emplace_back("ablate.batch", int_key(&RunConfig::ablate_batch, 1, 1024));
        t.emplace_back("ablate.rollouts", int_key(&RunConfig::ablate_rollouts, 1, 10000));
        t.emplace_back("ablate.lact_width", int_key(&RunConfig::ablate_lact_width, 8, 1024));
        t.emplace_back("ablate.lact_layers", int_key(&RunConfig::ablate_lact_layers, 1, 16));
        t.emplace_back("ablate.demos", int_key(&RunConfig::ablate_demos, 1, 100000));
        t.emplace_back("ablate.episodes", int_key(&RunConfig::ablate_episodes, 1, 100000));
        t.emplace_back("ablate.threads", int_key(&RunConfig::ablate_threads, 1, 64));
        t.emplace_back("paths.out_dir", string_key(&RunConfig::out_dir));
        t.emplace_back("paths.dataset", string_key(&RunConfig::dataset_path));
        t.emplace_back("paths.latent_cache", string_key(&RunConfig::latent_cache_path));
        t.emplace_back("paths.unilarn_ckpt", string_key(&RunConfig::unilarn_ckpt));
        t.emplace_back("paths.pretrain_ckpt", string_key(&RunConfig::pretrain_ckpt));
        t.emplace_back("paths.policy_ckpt", string_key(&RunConfig::policy_ckpt));
        return t;
    }();
    return table;
}

const KeySpec* find_key(const std::string& key) {
    for (const auto& [name, spec] : key_table())
        if (name == key) return &spec;
    return nullptr;
}

void cross_validate(const RunConfig& cfg) {
    if (cfg.larn_width % cfg.larn_heads != 0)
        config_error("unilarn.width", "must be divisible by unilarn.heads");
    if (cfg.lact_width % cfg.lact_heads != 0)
        config_error("unilact.width", "must be divisible by unilact.heads");
    if (cfg.ablate_lact_width % cfg.lact_heads != 0)
        config_error("ablate.lact_width", "must be divisible by unilact.heads");
    if (cfg.frame_size % cfg.larn_patch != 0)
        config_error("unilarn.patch", "must divide data.frame_size");
    if (cfg.frame_size % cfg.visual_patch != 0)
        config_error("unilact.visual_patch", "must divide data.frame_size");
    if (cfg.codebook_entries > 65535)
        config_error("latent.K", "must fit in a u16 latent cache record");
}

}  // namespace

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                        ": expected 'section.key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const KeySpec* spec = find_key(key);
        if (!spec) throw std::invalid_argument("config: unknown key '" + key + "'");
        try {
            spec->set(cfg, value);
        } catch (const std::out_of_range& e) {
            config_error(key, e.what());
        }
    }
    if (const char* env_seed = std::getenv("ULACT_SEED")) {
        const KeySpec* spec = find_key("data.seed");
        try {
            spec->set(cfg, env_seed);
        } catch (const std::out_of_range& e) {
            config_error("ULACT_SEED", e.what());
        }
    }
    cross_validate(cfg);
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string config_to_text(const RunConfig& cfg) {
    std::ostringstream out;
    for (const auto& [name, spec] : key_table()) out << name << " = " << spec.get(cfg) << "\n";
    return out.str();
}

std::string structural_signature(const RunConfig& cfg) {
    std::ostringstream out;
    for (const auto& [name, spec] : key_table())
        if (spec.structural) out << name << " = " << spec.get(cfg) << "\n";
    return out.str();
}

std::uint64_t config_hash(const RunConfig& cfg) {
    const std::string text = config_to_text(cfg);
    return hash_bytes(text.data(), text.size());
}

}  // namespace ulact
