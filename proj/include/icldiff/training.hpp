#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "diffusion.hpp"
#include "model.hpp"
#include "optim.hpp"

namespace icl {

/// Uniform over the directed training tasks.
inline TaskSpec sample_task(Rng& rng) {
    static const std::vector<TaskSpec> tasks = tasks_of(Split::train);
    return tasks[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(tasks.size()) - 1))];
}

enum class DropOutcome { drop_text, drop_context, drop_both, keep };

inline const char* drop_outcome_name(DropOutcome o) {
    switch (o) {
        case DropOutcome::drop_text: return "drop_text";
        case DropOutcome::drop_context: return "drop_context";
        case DropOutcome::drop_both: return "drop_both";
        case DropOutcome::keep: return "keep";
    }
    return "?";
}

inline DropOutcome draw_dropout(Rng& rng, const DropoutRates& r) {
    const double u = rng.uniform();
    if (u < r.text_only) return DropOutcome::drop_text;
    if (u < r.text_only + r.context_only) return DropOutcome::drop_context;
    if (u < r.text_only + r.context_only + r.both) return DropOutcome::drop_both;
    return DropOutcome::keep;
}

inline DropOutcome apply_condition_dropout(CondRequest& req, Rng& rng, const DropoutRates& r) {
    const DropOutcome o = draw_dropout(rng, r);
    req.text_dropped    = o == DropOutcome::drop_text || o == DropOutcome::drop_both;
    req.context_dropped = o == DropOutcome::drop_context || o == DropOutcome::drop_both;
    return o;
}

/// Training items: drawn procedurally from the train seed space, or sampled from a written corpus.
class ItemSource {
public:
    ItemSource(const CorpusConfig& cfg, const std::string& corpus_dir) : cfg_(cfg) {
        cfg_.seed_space = SeedSpace::train;
        if (!corpus_dir.empty()) {
            for (auto& it : read_corpus(corpus_dir)) {
                if (it.task.split() == Split::train) {
                    by_task_[it.task.name()].push_back(std::move(it));
                }
            }
            for (auto& t : tasks_of(Split::train)) {
                if (by_task_[t.name()].empty()) {
                    throw ConfigError("corpus " + corpus_dir + " has no items for training task " + t.name());
                }
            }
            from_corpus_ = true;
        }
    }

    DatasetItem draw(Rng& rng, const TaskSpec& task, int k) const {
        if (!from_corpus_) {
            return make_item(rng, task, k, cfg_);
        }
        const auto& pool = by_task_.at(task.name());
        DatasetItem it   = pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(pool.size()) - 1))];
        if (static_cast<int>(it.context.size()) < k) {
            throw ConfigError("corpus item " + it.id + " has fewer than k=" + std::to_string(k) + " context pairs");
        }
        it.context.resize(static_cast<size_t>(k));
        return it;
    }

private:
    CorpusConfig cfg_;
    bool from_corpus_ = false;
    std::map<std::string, std::vector<DatasetItem>> by_task_;
};

struct TrainBatch {
    std::vector<DatasetItem> items;
    std::vector<CondRequest> requests;
    std::vector<DropOutcome> outcomes;
};

/// Stage A: context always dropped, text dropped with stage_a_text_drop, no hint.
/// Stage B: four-way condition dropout, hint = query.
inline TrainBatch build_batch(Rng& rng, const ItemSource& source, const TrainConfig& tc, int batch_size) {
    TrainBatch b;
    for (int i = 0; i < batch_size; i++) {
        const TaskSpec task = sample_task(rng);
        DatasetItem item    = source.draw(rng, task, tc.k);
        CondRequest r;
        r.prompt = item.caption;
        if (tc.stage == Stage::A) {
            r.context_dropped = true;
            r.text_dropped    = rng.bernoulli(tc.stage_a_text_drop);
            b.outcomes.push_back(r.text_dropped ? DropOutcome::drop_both : DropOutcome::drop_context);
        } else {
            b.outcomes.push_back(apply_condition_dropout(r, rng, tc.dropout));
            r.context = item.context;
            r.hint    = item.query;
        }
        b.requests.push_back(std::move(r));
        b.items.push_back(std::move(item));
    }
    return b;
}

/// Loss of one batch; the graph is kept for backward.
inline Var<float> batch_loss(const IclModel<float>& model, const Schedule& sched, const TrainBatch& b, Rng& rng) {
    std::vector<const Image*> targets;
    std::vector<std::string> ids;
    for (auto& it : b.items) {
        targets.push_back(&it.target);
        ids.push_back(it.task.name() + "/" + std::to_string(it.seed));
    }
    Tensor<float> x0 = stack_model_space<float>(targets);
    std::vector<int> ts;
    for (size_t i = 0; i < b.items.size(); i++) {
        ts.push_back(static_cast<int>(rng.uniform_int(1, sched.T)));
    }
    Tensor<float> eps(x0.shape);
    for (auto& v : eps.data) {
        v = static_cast<float>(rng.normal());
    }
    auto cond = model.condition(b.requests);
    return training_loss(
        sched, x0, ts, eps, [&](const Tensor<float>& z, const std::vector<int>& t) { return model.predict(constant(z), t, cond); },
        ids);
}

inline Checkpoint make_checkpoint(const IclModel<float>& model, const RunConfig& rc, int64_t step, const Rng& rng) {
    Checkpoint ck;
    ck.config    = to_json(rc);
    ck.vocab     = model.vocab();
    ck.step      = step;
    ck.rng_state = rng.state();
    ck.tensors   = snapshot_tensors(model);
    return ck;
}

/// Fresh stage-A model for a run config.
inline IclModel<float> init_model(const RunConfig& rc) {
    return IclModel<float>(rc.model_config(), Vocabulary::standard(), derive_seed(rc.train.seed, "init"));
}

/// Stage-B starting point: the stage-A checkpoint with a control branch and context encoder attached.
/// The run's model section must agree with the checkpoint's.
inline IclModel<float> init_stage_b(const Checkpoint& init, const RunConfig& rc) {
    const nlohmann::json want = to_json(rc);
    for (const char* key : {"model"}) {
        if (init.config.at(key) != want.at(key)) {
            throw CheckpointError(std::string("init checkpoint ") + key + " section differs from the run config");
        }
    }
    if (init.config.at("corpus").at("image_size") != want["corpus"]["image_size"] ||
        init.config.at("diffusion").at("timesteps") != want["diffusion"]["timesteps"]) {
        throw CheckpointError("init checkpoint image size or timestep count differs from the run config");
    }
    IclModel<float> model = model_from_checkpoint(init);
    if (!model.has_control()) {
        model.attach_control(derive_seed(rc.train.seed, "attach"));
    }
    return model;
}

struct TrainResult {
    std::filesystem::path checkpoint_path;
    std::vector<double> losses;  // one per optimizer step
    int64_t steps = 0;
};

using ProgressFn = std::function<void(int64_t step, double loss)>;

/// Runs rc.train.steps optimizer steps on the model's trainable tensors. Writes metrics.csv,
/// cadence checkpoints ckpt_<step>.bin and final.bin into out_dir.
inline TrainResult train(IclModel<float>& model, const RunConfig& rc, const std::filesystem::path& out_dir,
                         const ProgressFn& progress = {}) {
    rc.validate();
    const TrainConfig& tc = rc.train;
    if (tc.stage == Stage::B && !model.has_control()) {
        throw ConfigError("stage B needs a model with an attached control branch");
    }
    if (tc.stage == Stage::A && model.has_control()) {
        throw ConfigError("stage A trains the text encoder and core; this model already has a control branch");
    }
    std::filesystem::create_directories(out_dir);
    const Schedule sched = rc.diffusion.make();
    ItemSource source(rc.corpus, tc.corpus);
    Rng rng(derive_seed(tc.seed, std::string("train/") + stage_name(tc.stage)));
    AdamW<float> opt(model.trainable_parameters(), tc.optim);

    std::ofstream metrics(out_dir / "metrics.csv");
    if (!metrics) {
        throw IoError("cannot write " + (out_dir / "metrics.csv").string());
    }
    metrics << "step,loss,lr,task_histogram\n";
    metrics.precision(9);

    TrainResult res;
    for (int64_t step = 1; step <= tc.steps; step++) {
        opt.zero_grad();
        double loss_sum = 0;
        std::map<std::string, int> hist;
        for (int a = 0; a < tc.grad_accum; a++) {
            TrainBatch b    = build_batch(rng, source, tc, tc.batch_size);
            Var<float> loss = batch_loss(model, sched, b, rng);
            loss_sum += loss.value()[0];
            for (auto& it : b.items) {
                hist[it.task.name()]++;
            }
            (tc.grad_accum == 1 ? loss : scale(loss, 1.0f / static_cast<float>(tc.grad_accum))).backward();
        }
        opt.step();
        const double mean_loss = loss_sum / tc.grad_accum;
        res.losses.push_back(mean_loss);
        if (step % tc.log_every == 0 || step == tc.steps) {
            std::string h;
            for (auto& [name, n] : hist) {
                h += (h.empty() ? "" : ";") + name + ":" + std::to_string(n);
            }
            metrics << step << "," << mean_loss << "," << tc.optim.lr << "," << h << "\n";
        }
        if (progress) {
            progress(step, mean_loss);
        }
        if (tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0 && step != tc.steps) {
            save_checkpoint(make_checkpoint(model, rc, step, rng), out_dir / ("ckpt_" + std::to_string(step) + ".bin"));
        }
    }
    opt.zero_grad();
    res.steps           = tc.steps;
    res.checkpoint_path = out_dir / "final.bin";
    save_checkpoint(make_checkpoint(model, rc, tc.steps, rng), res.checkpoint_path);
    return res;
}

}  // namespace icl
