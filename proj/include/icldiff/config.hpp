#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "corpus.hpp"
#include "diffusion.hpp"
#include "errors.hpp"
#include "model.hpp"
#include "optim.hpp"

namespace icl {

struct DiffusionConfig {
    int timesteps         = 1000;
    std::string schedule  = "linear";
    double beta_start     = 1e-4;
    double beta_end       = 0.02;
    int sample_steps      = 50;
    double guidance_scale = 3.0;

    Schedule make() const { return make_schedule(timesteps, parse_schedule_kind(schedule), beta_start, beta_end); }
};

enum class Stage { A, B };

inline Stage parse_stage(const std::string& s) {
    if (s == "A" || s == "a") return Stage::A;
    if (s == "B" || s == "b") return Stage::B;
    throw ConfigError("stage must be A or B, got '" + s + "'");
}
inline std::string stage_name(Stage s) { return s == Stage::A ? "A" : "B"; }

struct DropoutRates {
    double text_only    = 0.4;
    double context_only = 0.4;
    double both         = 0.1;

    void validate() const {
        if (text_only < 0 || context_only < 0 || both < 0 || text_only + context_only + both > 1.0 + 1e-12) {
            throw ConfigError("dropout rates must be nonnegative with text_only + context_only + both <= 1");
        }
    }
};

struct TrainConfig {
    Stage stage              = Stage::A;
    int64_t steps            = 20000;
    int batch_size           = 32;
    int grad_accum           = 1;
    AdamWConfig optim;
    DropoutRates dropout;
    double stage_a_text_drop = 0.1;  // stage A: probability of training on the empty prompt
    int k                    = 1;    // context pairs per training item in stage B
    uint64_t seed            = 0;
    int64_t checkpoint_every = 0;    // 0: final checkpoint only
    int64_t log_every        = 1;
    std::string corpus;              // manifest directory; empty: sample scenes procedurally

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("train: " + m); };
        if (steps < 0) fail("steps must be >= 0");
        if (batch_size < 1 || grad_accum < 1) fail("batch_size and grad_accum must be >= 1");
        if (optim.lr <= 0 || optim.beta1 < 0 || optim.beta1 >= 1 || optim.beta2 < 0 || optim.beta2 >= 1 || optim.eps <= 0 ||
            optim.weight_decay < 0)
            fail("invalid optimizer settings");
        if (stage_a_text_drop < 0 || stage_a_text_drop > 1) fail("stage_a_text_drop must lie in [0, 1]");
        if (k < 1) fail("k must be >= 1");
        if (checkpoint_every < 0 || log_every < 1) fail("checkpoint_every >= 0 and log_every >= 1 required");
        dropout.validate();
    }
};

struct EvalConfig {
    int n                 = 256;
    int k                 = 1;
    uint64_t seed         = 1;
    std::vector<std::string> tasks = {"train"};  // task names, or the groups train / heldout / all
    std::vector<std::string> modes = {"empty"};
    int contact_rows      = 8;
    int probe_m           = 32;
    int batch             = 64;

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("eval: " + m); };
        if (n < 1 || k < 1 || contact_rows < 0 || probe_m < 2 || batch < 1) fail("n, k, batch >= 1, probe_m >= 2 required");
        for (auto& m : modes) {
            try {
                (void)parse_prompt_mode(m);
            } catch (const std::invalid_argument& e) {
                fail(e.what());
            }
        }
    }
};

/// Expands task groups (train, heldout, all) and names into directed tasks.
inline std::vector<TaskSpec> expand_tasks(const std::vector<std::string>& items) {
    std::vector<TaskSpec> out;
    auto add = [&](const std::vector<TaskSpec>& ts) { out.insert(out.end(), ts.begin(), ts.end()); };
    for (auto& s : items) {
        if (s == "train") add(tasks_of(Split::train));
        else if (s == "heldout") add(tasks_of(Split::heldout));
        else if (s == "all") add(all_tasks());
        else {
            try {
                out.push_back(TaskSpec::parse(s));
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        }
    }
    return out;
}

struct RunConfig {
    CorpusConfig corpus;
    uint64_t corpus_seed = 0;
    ModelConfig model;
    DiffusionConfig diffusion;
    TrainConfig train;
    EvalConfig eval;

    /// Model config with the image size and timestep count shared from the other sections.
    ModelConfig model_config() const {
        ModelConfig m     = model;
        m.image_size      = corpus.image_size;
        m.unet.timesteps  = diffusion.timesteps;
        return m;
    }

    void validate() const {
        corpus.validate();
        model_config().validate();
        if (diffusion.timesteps < 1) throw ConfigError("diffusion: timesteps must be >= 1");
        (void)parse_schedule_kind(diffusion.schedule);
        if (!(diffusion.beta_start > 0 && diffusion.beta_start <= diffusion.beta_end && diffusion.beta_end < 1))
            throw ConfigError("diffusion: need 0 < beta_start <= beta_end < 1");
        if (diffusion.sample_steps < 1 || diffusion.sample_steps > diffusion.timesteps)
            throw ConfigError("diffusion: sample_steps must lie in [1, timesteps]");
        train.validate();
        eval.validate();
        if (train.k > corpus.max_k || eval.k > corpus.max_k) throw ConfigError("k exceeds corpus.max_k");
    }
};

inline nlohmann::json to_json(const RunConfig& c) {
    const auto& cp = c.corpus;
    const auto& m  = c.model;
    const auto& d  = c.diffusion;
    const auto& t  = c.train;
    const auto& e  = c.eval;
    return {
        {"corpus",
         {{"image_size", cp.image_size}, {"min_shapes", cp.min_shapes}, {"max_shapes", cp.max_shapes},
          {"min_shape_size", cp.min_shape_size}, {"max_shape_size", cp.max_shape_size}, {"blur_sigma", cp.blur_sigma},
          {"blur_radius", cp.blur_radius}, {"dilate_iterations", cp.dilate_iterations},
          {"edge_threshold", cp.edge_threshold}, {"k", cp.k}, {"max_k", cp.max_k}, {"count", cp.count},
          {"tasks", cp.tasks}, {"seed", c.corpus_seed}}},
        {"model",
         {{"d", m.d},
          {"vc_mode", vc_mode_name(m.vc_mode)},
          {"text", {{"max_len", m.text.max_len}, {"layers", m.text.layers}, {"heads", m.text.heads}}},
          {"context",
           {{"patch", m.context.patch}, {"width", m.context.width}, {"depth", m.context.depth},
            {"heads", m.context.heads}, {"zero_output", m.context.zero_output}}},
          {"unet",
           {{"base", m.unet.base}, {"mult", m.unet.mult}, {"res_blocks", m.unet.res_blocks},
            {"attn_levels", m.unet.attn_levels}, {"heads", m.unet.heads}, {"temb_dim", m.unet.temb_dim},
            {"groups", m.unet.groups}}}}},
        {"diffusion",
         {{"timesteps", d.timesteps}, {"schedule", d.schedule}, {"beta_start", d.beta_start}, {"beta_end", d.beta_end},
          {"sample_steps", d.sample_steps}, {"guidance_scale", d.guidance_scale}}},
        {"train",
         {{"stage", stage_name(t.stage)}, {"steps", t.steps}, {"batch_size", t.batch_size},
          {"grad_accum", t.grad_accum}, {"lr", t.optim.lr}, {"beta1", t.optim.beta1}, {"beta2", t.optim.beta2},
          {"eps", t.optim.eps}, {"weight_decay", t.optim.weight_decay},
          {"dropout", {{"text_only", t.dropout.text_only}, {"context_only", t.dropout.context_only}, {"both", t.dropout.both}}},
          {"stage_a_text_drop", t.stage_a_text_drop}, {"k", t.k}, {"seed", t.seed},
          {"checkpoint_every", t.checkpoint_every}, {"log_every", t.log_every}, {"corpus", t.corpus}}},
        {"eval",
         {{"n", e.n}, {"k", e.k}, {"seed", e.seed}, {"tasks", e.tasks}, {"modes", e.modes},
          {"contact_rows", e.contact_rows}, {"probe_m", e.probe_m}, {"batch", e.batch}}},
    };
}

namespace detail {

/// Every key in `user` must exist in `schema`; objects recurse, other values must match the schema's kind.
inline void check_keys(const nlohmann::json& user, const nlohmann::json& schema, const std::string& path) {
    if (!user.is_object()) {
        throw ConfigError("config: '" + (path.empty() ? std::string("<root>") : path) + "' must be an object");
    }
    for (auto it = user.begin(); it != user.end(); ++it) {
        const std::string p = path.empty() ? it.key() : path + "." + it.key();
        if (!schema.contains(it.key())) {
            throw ConfigError("config: unknown key '" + p + "'");
        }
        const auto& s = schema.at(it.key());
        if (s.is_object()) {
            check_keys(it.value(), s, p);
        } else if (s.is_number() != it.value().is_number() || s.is_string() != it.value().is_string() ||
                   s.is_boolean() != it.value().is_boolean() || s.is_array() != it.value().is_array()) {
            throw ConfigError("config: '" + p + "' has the wrong type (expected " + std::string(s.type_name()) + ")");
        }
    }
}

template <typename V>
void get_to(const nlohmann::json& j, const char* key, V& v, const std::string& section) {
    try {
        j.at(key).get_to(v);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: " + section + "." + key + ": " + e.what());
    }
}

}  // namespace detail

/// Parses a (possibly partial) config over the defaults. Unknown keys and type mismatches are rejected.
inline RunConfig config_from_json(const nlohmann::json& user) {
    const RunConfig defaults;
    nlohmann::json merged = to_json(defaults);
    detail::check_keys(user, merged, "");
    merged.merge_patch(user);
    RunConfig c;
    using detail::get_to;
    const auto& cp = merged["corpus"];
    get_to(cp, "image_size", c.corpus.image_size, "corpus");
    get_to(cp, "min_shapes", c.corpus.min_shapes, "corpus");
    get_to(cp, "max_shapes", c.corpus.max_shapes, "corpus");
    get_to(cp, "min_shape_size", c.corpus.min_shape_size, "corpus");
    get_to(cp, "max_shape_size", c.corpus.max_shape_size, "corpus");
    get_to(cp, "blur_sigma", c.corpus.blur_sigma, "corpus");
    get_to(cp, "blur_radius", c.corpus.blur_radius, "corpus");
    get_to(cp, "dilate_iterations", c.corpus.dilate_iterations, "corpus");
    get_to(cp, "edge_threshold", c.corpus.edge_threshold, "corpus");
    get_to(cp, "k", c.corpus.k, "corpus");
    get_to(cp, "max_k", c.corpus.max_k, "corpus");
    get_to(cp, "count", c.corpus.count, "corpus");
    get_to(cp, "tasks", c.corpus.tasks, "corpus");
    get_to(cp, "seed", c.corpus_seed, "corpus");

    const auto& m = merged["model"];
    get_to(m, "d", c.model.d, "model");
    std::string vc;
    get_to(m, "vc_mode", vc, "model");
    try {
        c.model.vc_mode = parse_vc_mode(vc);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("config: model.vc_mode: ") + e.what());
    }
    get_to(m["text"], "max_len", c.model.text.max_len, "model.text");
    get_to(m["text"], "layers", c.model.text.layers, "model.text");
    get_to(m["text"], "heads", c.model.text.heads, "model.text");
    get_to(m["context"], "patch", c.model.context.patch, "model.context");
    get_to(m["context"], "width", c.model.context.width, "model.context");
    get_to(m["context"], "depth", c.model.context.depth, "model.context");
    get_to(m["context"], "heads", c.model.context.heads, "model.context");
    get_to(m["context"], "zero_output", c.model.context.zero_output, "model.context");
    const auto& u = m["unet"];
    get_to(u, "base", c.model.unet.base, "model.unet");
    get_to(u, "mult", c.model.unet.mult, "model.unet");
    get_to(u, "res_blocks", c.model.unet.res_blocks, "model.unet");
    get_to(u, "attn_levels", c.model.unet.attn_levels, "model.unet");
    get_to(u, "heads", c.model.unet.heads, "model.unet");
    get_to(u, "temb_dim", c.model.unet.temb_dim, "model.unet");
    get_to(u, "groups", c.model.unet.groups, "model.unet");

    const auto& d = merged["diffusion"];
    get_to(d, "timesteps", c.diffusion.timesteps, "diffusion");
    get_to(d, "schedule", c.diffusion.schedule, "diffusion");
    get_to(d, "beta_start", c.diffusion.beta_start, "diffusion");
    get_to(d, "beta_end", c.diffusion.beta_end, "diffusion");
    get_to(d, "sample_steps", c.diffusion.sample_steps, "diffusion");
    get_to(d, "guidance_scale", c.diffusion.guidance_scale, "diffusion");

    const auto& t = merged["train"];
    std::string stage;
    get_to(t, "stage", stage, "train");
    c.train.stage = parse_stage(stage);
    get_to(t, "steps", c.train.steps, "train");
    get_to(t, "batch_size", c.train.batch_size, "train");
    get_to(t, "grad_accum", c.train.grad_accum, "train");
    get_to(t, "lr", c.train.optim.lr, "train");
    get_to(t, "beta1", c.train.optim.beta1, "train");
    get_to(t, "beta2", c.train.optim.beta2, "train");
    get_to(t, "eps", c.train.optim.eps, "train");
    get_to(t, "weight_decay", c.train.optim.weight_decay, "train");
    get_to(t["dropout"], "text_only", c.train.dropout.text_only, "train.dropout");
    get_to(t["dropout"], "context_only", c.train.dropout.context_only, "train.dropout");
    get_to(t["dropout"], "both", c.train.dropout.both, "train.dropout");
    get_to(t, "stage_a_text_drop", c.train.stage_a_text_drop, "train");
    get_to(t, "k", c.train.k, "train");
    get_to(t, "seed", c.train.seed, "train");
    get_to(t, "checkpoint_every", c.train.checkpoint_every, "train");
    get_to(t, "log_every", c.train.log_every, "train");
    get_to(t, "corpus", c.train.corpus, "train");

    const auto& e = merged["eval"];
    get_to(e, "n", c.eval.n, "eval");
    get_to(e, "k", c.eval.k, "eval");
    get_to(e, "seed", c.eval.seed, "eval");
    get_to(e, "tasks", c.eval.tasks, "eval");
    get_to(e, "modes", c.eval.modes, "eval");
    get_to(e, "contact_rows", c.eval.contact_rows, "eval");
    get_to(e, "probe_m", c.eval.probe_m, "eval");
    get_to(e, "batch", c.eval.batch, "eval");
    c.validate();
    return c;
}

/// Applies "section.key=value" overrides. Values parse as JSON when possible, otherwise as strings.
inline nlohmann::json apply_overrides(nlohmann::json user, const std::vector<std::string>& overrides) {
    if (user.is_null()) {
        user = nlohmann::json::object();
    }
    const nlohmann::json schema = to_json(RunConfig{});
    for (auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw ConfigError("override '" + o + "' must look like section.key=value");
        }
        const std::string path = o.substr(0, eq), raw = o.substr(eq + 1);
        nlohmann::json value;
        try {
            value = nlohmann::json::parse(raw);
        } catch (const nlohmann::json::exception&) {
            value = raw;
        }
        nlohmann::json::json_pointer ptr("/" + [&] {
            std::string p = path;
            std::replace(p.begin(), p.end(), '.', '/');
            return p;
        }());
        if (!schema.contains(ptr) || schema.at(ptr).is_object()) {
            throw ConfigError("override '" + path + "' does not name a config leaf");
        }
        if (schema.at(ptr).is_string() && !value.is_string()) {
            value = raw;
        }
        user[ptr] = value;
    }
    return user;
}

/// Short stable fingerprint of a config document.
inline std::string config_hash(const nlohmann::json& j) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(derive_seed(0, j.dump())));
    return buf;
}

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot read config " + path.string());
    }
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream f(path);
    if (!f) {
        throw IoError("cannot write " + path.string());
    }
    f << j.dump(2) << "\n";
}

/// Builds the model described by a checkpoint and loads its tensors.
inline IclModel<float> model_from_checkpoint(const Checkpoint& ck) {
    RunConfig rc;
    try {
        rc = config_from_json(ck.config);
    } catch (const ConfigError& e) {
        throw CheckpointError(std::string("checkpoint config invalid: ") + e.what());
    }
    IclModel<float> model(rc.model_config(), ck.vocab, 0);
    if (ck.has_group(ParamGroup::theta_prime) || ck.has_group(ParamGroup::phi)) {
        model.attach_control(0);
    }
    load_tensors(model, ck);
    return model;
}

}  // namespace icl
