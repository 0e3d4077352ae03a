// icldiff: corpus generation, two-stage training, sampling, evaluation and probing.
//
// Exit codes: 0 ok, 1 unexpected failure, 2 config/usage error, 3 I/O error, 4 non-finite loss,
// 5 checkpoint mismatch. Human messages go to stderr; result paths go to stdout.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

#include "icldiff/icldiff.hpp"

namespace fs = std::filesystem;
using namespace icl;

namespace {

struct CommonArgs {
    std::string config;
    std::vector<std::string> set;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config, "JSON run config");
    cmd->add_option("--set", a.set, "override a config leaf, e.g. train.lr=0.001 (repeatable)");
}

nlohmann::json user_config(const CommonArgs& a, const nlohmann::json& base = nlohmann::json::object()) {
    nlohmann::json j = a.config.empty() ? base : read_json_file(a.config);
    return apply_overrides(j, a.set);
}

void write_text(const fs::path& p, const std::string& s) {
    if (p.has_parent_path()) {
        fs::create_directories(p.parent_path());
    }
    std::ofstream f(p);
    if (!f) {
        throw IoError("cannot write " + p.string());
    }
    f << s;
}

// ---------------------------------------------------------------- gen-corpus

struct GenArgs {
    CommonArgs common;
    std::string out;
    std::optional<uint64_t> seed;
    std::optional<int64_t> count;
};

int cmd_gen_corpus(const GenArgs& a) {
    nlohmann::json j = user_config(a.common);
    if (a.seed) j["corpus"]["seed"] = *a.seed;
    if (a.count) j["corpus"]["count"] = *a.count;
    RunConfig rc = config_from_json(j);
    write_json_file(fs::path(a.out) / "config.json", to_json(rc));
    Manifest m = write_corpus(rc.corpus, a.out, rc.corpus_seed);
    int64_t total = 0;
    for (auto& [task, n] : m.per_task) {
        std::cout << task << " " << n << "\n";
        total += n;
    }
    std::cerr << "wrote " << total << " items to " << a.out << "\n";
    std::cout << (fs::path(a.out) / "manifest.jsonl").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
    CommonArgs common;
    std::string stage;
    std::string init;
    std::string out;
    std::optional<int64_t> steps;
    std::optional<uint64_t> seed;
};

int cmd_train(const TrainArgs& a) {
    std::optional<Checkpoint> init;
    nlohmann::json base = nlohmann::json::object();
    const Stage stage   = parse_stage(a.stage);
    if (stage == Stage::B) {
        if (a.init.empty()) {
            throw ConfigError("stage B requires --init CHECKPOINT (the stage-A result)");
        }
        init = load_checkpoint(a.init);
        base = init->config;  // inherit the model, corpus and diffusion settings of stage A
    }
    nlohmann::json j = user_config(a.common, base);
    j["train"]["stage"] = stage_name(stage);
    if (a.steps) j["train"]["steps"] = *a.steps;
    if (a.seed) j["train"]["seed"] = *a.seed;
    RunConfig rc = config_from_json(j);
    write_json_file(fs::path(a.out) / "config.json", to_json(rc));

    IclModel<float> model = init ? init_stage_b(*init, rc) : init_model(rc);
    const auto t0   = std::chrono::steady_clock::now();
    const int64_t every = std::max<int64_t>(1, rc.train.steps / 20);
    auto progress = [&](int64_t step, double loss) {
        if (step % every == 0 || step == rc.train.steps) {
            const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::fprintf(stderr, "step %lld/%lld loss %.5f (%.1fs)\n", static_cast<long long>(step),
                         static_cast<long long>(rc.train.steps), loss, s);
        }
    };
    TrainResult r = train(model, rc, a.out, progress);
    std::cout << r.checkpoint_path.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- sample

struct SampleArgs {
    std::string checkpoint;
    std::string context_dir;
    std::string query;
    std::string prompt;
    std::string mode;
    std::optional<int> steps;
    std::optional<double> scale;
    uint64_t seed = 0;
    std::string out;
};

std::vector<ImagePair> read_context_dir(const fs::path& dir) {
    std::vector<ImagePair> pairs;
    for (int i = 0;; i++) {
        const fs::path src = dir / ("ctx" + std::to_string(i) + "_src.png");
        const fs::path tgt = dir / ("ctx" + std::to_string(i) + "_tgt.png");
        if (!fs::exists(src) && !fs::exists(tgt)) {
            break;
        }
        if (!fs::exists(src)) throw IoError("missing context file " + src.string());
        if (!fs::exists(tgt)) throw IoError("missing context file " + tgt.string());
        pairs.push_back({read_png(src), read_png(tgt)});
    }
    if (pairs.empty()) {
        throw IoError("missing context file " + (dir / "ctx0_src.png").string());
    }
    return pairs;
}

int cmd_sample(const SampleArgs& a) {
    Checkpoint ck      = load_checkpoint(a.checkpoint);
    RunConfig rc       = config_from_json(ck.config);
    IclModel<float> m  = model_from_checkpoint(ck);
    const VcMode mode  = a.mode.empty() ? rc.model.vc_mode : parse_vc_mode(a.mode);
    if (mode != VcMode::none && mode != rc.model.vc_mode) {
        throw ConfigError("--mode " + vc_mode_name(mode) + " does not match the checkpoint's trained mode " +
                          vc_mode_name(rc.model.vc_mode));
    }
    const auto words = split_words(a.prompt);
    if (mode == VcMode::concat && std::find(words.begin(), words.end(), kVcToken) != words.end()) {
        throw ConfigError("--mode concat cannot take a prompt containing " + std::string(kVcToken));
    }
    Image query = read_png(a.query);
    std::vector<ImagePair> context;
    if (mode != VcMode::none) {
        context = read_context_dir(a.context_dir);
    }
    const int size = rc.corpus.image_size;
    auto check_size = [&](const Image& im, const std::string& what) {
        if (image_height(im) != size || image_width(im) != size) {
            throw ConfigError(what + " is " + std::to_string(image_width(im)) + "x" + std::to_string(image_height(im)) +
                              ", the checkpoint expects " + std::to_string(size) + "x" + std::to_string(size));
        }
    };
    check_size(query, "query");
    for (auto& p : context) {
        check_size(p.source, "context source");
        check_size(p.target, "context target");
    }
    DiffusionConfig dc = rc.diffusion;
    if (a.steps) dc.sample_steps = *a.steps;
    if (a.scale) dc.guidance_scale = *a.scale;
    if (dc.sample_steps < 1 || dc.sample_steps > dc.timesteps) {
        throw ConfigError("--steps must lie in [1, " + std::to_string(dc.timesteps) + "]");
    }
    const Schedule sched = dc.make();
    Generator gen = model_generator(m, sched, dc.sample_steps, dc.guidance_scale, mode == VcMode::none);
    GenRequest req{context, query, a.prompt, a.seed};
    Image out = gen({req}).at(0);
    const fs::path out_path(a.out);
    if (out_path.has_parent_path()) {
        fs::create_directories(out_path.parent_path());
    }
    write_png(out_path, out);
    std::vector<Image> row;
    for (auto& p : context) {
        row.push_back(p.source);
        row.push_back(p.target);
    }
    row.push_back(query);
    row.push_back(out);
    fs::path sheet = out_path;
    sheet.replace_filename(out_path.stem().string() + "_sheet.png");
    write_png(sheet, tile_images({row}));
    std::cout << out_path.string() << "\n" << sheet.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
    CommonArgs common;
    std::vector<std::string> checkpoints;
    std::vector<std::string> tasks;
    std::vector<std::string> modes;
    std::optional<int> n;
    std::optional<int> k;
    std::optional<uint64_t> seed;
    std::optional<int> steps;
    std::optional<double> scale;
    std::string context = "matched";
    std::string out;
};

/// Loads a checkpoint and checks that it can be evaluated under the given corpus settings.
IclModel<float> load_for_eval(const std::string& path, const RunConfig& rc) {
    Checkpoint ck = load_checkpoint(path);
    const int size = ck.config.at("corpus").at("image_size").get<int>();
    if (size != rc.corpus.image_size) {
        throw CheckpointError(path + " was trained at " + std::to_string(size) + "px; the evaluation uses " +
                              std::to_string(rc.corpus.image_size) + "px");
    }
    return model_from_checkpoint(ck);
}

int cmd_eval(const EvalArgs& a) {
    if (a.checkpoints.empty()) {
        throw ConfigError("eval needs at least one --checkpoint");
    }
    nlohmann::json base = read_checkpoint_header(a.checkpoints.front()).config;
    nlohmann::json j    = user_config(a.common, base);
    if (!a.tasks.empty()) j["eval"]["tasks"] = a.tasks;
    if (!a.modes.empty()) j["eval"]["modes"] = a.modes;
    if (a.n) j["eval"]["n"] = *a.n;
    if (a.k) j["eval"]["k"] = *a.k;
    if (a.seed) j["eval"]["seed"] = *a.seed;
    if (a.steps) j["diffusion"]["sample_steps"] = *a.steps;
    if (a.scale) j["diffusion"]["guidance_scale"] = *a.scale;
    RunConfig rc = config_from_json(j);
    const fs::path out(a.out);
    write_json_file(out / "config.json", to_json(rc));

    EvalSpec spec;
    for (auto& t : expand_tasks(rc.eval.tasks)) {
        if (t.direction == Direction::map2img && (t.annotator == Annotator::seg || t.annotator == Annotator::depth)) {
            std::cerr << "skipping " << t.name() << ": no cycle metric without scene geometry\n";
            continue;
        }
        spec.tasks.push_back(t);
    }
    for (auto& m : rc.eval.modes) {
        spec.modes.push_back(parse_prompt_mode(m));
    }
    spec.options.n            = rc.eval.n;
    spec.options.k            = rc.eval.k;
    spec.options.seed         = rc.eval.seed;
    spec.options.batch        = rc.eval.batch;
    spec.options.corpus       = rc.corpus;
    spec.options.contact_rows = rc.eval.contact_rows;
    spec.options.config_hash  = config_hash(to_json(rc));
    if (a.context == "mismatched") {
        spec.options.source = ContextSource::mismatched;
    } else if (a.context != "matched") {
        throw ConfigError("--context must be matched or mismatched");
    }
    if (rc.eval.contact_rows > 0) {
        spec.contact_dir = out / "sheets";
        fs::create_directories(*spec.contact_dir);
    }
    const Schedule sched = rc.diffusion.make();
    std::vector<IclModel<float>> models;
    models.reserve(a.checkpoints.size());
    std::vector<std::pair<std::string, Generator>> gens;
    for (auto& c : a.checkpoints) {
        models.push_back(load_for_eval(c, rc));
    }
    for (size_t i = 0; i < models.size(); i++) {
        gens.emplace_back(a.checkpoints[i],
                          model_generator(models[i], sched, rc.diffusion.sample_steps, rc.diffusion.guidance_scale));
    }
    SuiteResult res = run_suite(gens, spec);
    write_text(out / "table.csv", res.table_csv);
    write_text(out / "detail.csv", res.detail_csv);
    std::cerr << res.table_csv;
    std::cout << (out / "table.csv").string() << "\n" << (out / "detail.csv").string() << "\n";
    return 0;
}

// ---------------------------------------------------------------- probe

struct ProbeArgs {
    std::string checkpoint;
    std::optional<int> m;
    std::optional<uint64_t> seed;
    std::string out;
};

int cmd_probe(const ProbeArgs& a) {
    Checkpoint ck     = load_checkpoint(a.checkpoint);
    RunConfig rc      = config_from_json(ck.config);
    IclModel<float> m = model_from_checkpoint(ck);
    const int mm        = a.m.value_or(rc.eval.probe_m);
    const uint64_t seed = a.seed.value_or(rc.eval.seed);
    ProbeResult r = probe_embeddings(m, mm, seed, rc.corpus);
    const fs::path out(a.out);
    write_text(out / "projection.csv", projection_csv(r));
    write_json_file(out / "probe.json", {{"checkpoint", a.checkpoint}, {"m", mm}, {"seed", seed}, {"accuracy", r.accuracy},
                                         {"chance", 1.0 / static_cast<double>(tasks_of(Split::train).size())}});
    std::cerr << "nearest-centroid accuracy " << r.accuracy << "\n";
    std::cout << (out / "projection.csv").string() << "\n" << (out / "probe.json").string() << "\n";
    return 0;
}

template <typename Fn>
int guarded(Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const NonFiniteLossError& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return 4;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 5;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 2;
    } catch (const std::out_of_range& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"visual in-context learning for a toy pixel-space diffusion model"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* g = app.add_subcommand("gen-corpus", "write a synthetic task corpus");
    add_common(g, gen.common);
    g->add_option("--out", gen.out, "output directory")->required();
    g->add_option("--seed", gen.seed, "corpus seed");
    g->add_option("--count", gen.count, "items per directed task");

    TrainArgs tr;
    auto* t = app.add_subcommand("train", "train stage A (text encoder + core) or stage B (control + context)");
    add_common(t, tr.common);
    t->add_option("--stage", tr.stage, "A or B")->required();
    t->add_option("--init", tr.init, "stage-A checkpoint (stage B)");
    t->add_option("--out", tr.out, "run directory")->required();
    t->add_option("--steps", tr.steps, "optimizer steps");
    t->add_option("--seed", tr.seed, "training seed");

    SampleArgs sa;
    auto* s = app.add_subcommand("sample", "generate one image from context pairs and a query");
    s->add_option("--checkpoint", sa.checkpoint)->required();
    s->add_option("--context-dir", sa.context_dir, "directory with ctx<i>_src.png / ctx<i>_tgt.png");
    s->add_option("--query", sa.query, "query PNG")->required();
    s->add_option("--prompt", sa.prompt, "text prompt (may be empty)");
    s->add_option("--mode", sa.mode, "placeholder, concat or none");
    s->add_option("--steps", sa.steps, "DDIM steps");
    s->add_option("--scale", sa.scale, "guidance scale");
    s->add_option("--seed", sa.seed, "noise seed");
    s->add_option("--out", sa.out, "output PNG")->required();

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "RMSE tables over tasks and prompt modes");
    add_common(e, ev.common);
    e->add_option("--checkpoint", ev.checkpoints, "checkpoint(s)")->required();
    e->add_option("--tasks", ev.tasks, "task names or train / heldout / all")->delimiter(',');
    e->add_option("--modes", ev.modes, "full, taskname, empty, positive")->delimiter(',');
    e->add_option("--n", ev.n, "queries per cell");
    e->add_option("--k", ev.k, "context pairs per query");
    e->add_option("--seed", ev.seed, "evaluation seed");
    e->add_option("--steps", ev.steps, "DDIM steps");
    e->add_option("--scale", ev.scale, "guidance scale");
    e->add_option("--context", ev.context, "matched or mismatched");
    e->add_option("--out", ev.out, "output directory")->required();

    ProbeArgs pr;
    auto* p = app.add_subcommand("probe", "nearest-centroid probe and 2D projection of context embeddings");
    p->add_option("--checkpoint", pr.checkpoint)->required();
    p->add_option("--m", pr.m, "pairs per task");
    p->add_option("--seed", pr.seed, "probe seed");
    p->add_option("--out", pr.out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? 0 : 2;
    }
    if (*g) return guarded([&] { return cmd_gen_corpus(gen); });
    if (*t) return guarded([&] { return cmd_train(tr); });
    if (*s) return guarded([&] { return cmd_sample(sa); });
    if (*e) return guarded([&] { return cmd_eval(ev); });
    if (*p) return guarded([&] { return cmd_probe(pr); });
    return 2;
}
