#pragma once

#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "config.hpp"
#include "corpus.hpp"
#include "diffusion.hpp"
#include "image.hpp"
#include "model.hpp"

namespace icl {

inline double rmse(const Image& a, const Image& b) {
    check_shape(a.shape == b.shape, "rmse: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    check_shape(a.size() > 0, "rmse: empty image");
    double s = 0;
    for (int64_t i = 0; i < a.size(); i++) {
        const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return std::sqrt(s / static_cast<double>(a.size()));
}

/// What a generator is asked to do for one query.
struct GenRequest {
    std::vector<ImagePair> context;
    Image query;
    std::string prompt;
    uint64_t seed = 0;
};

/// Batched image generator: one output image (file space) per request.
using Generator = std::function<std::vector<Image>(const std::vector<GenRequest>&)>;

/// Sampling generator over a trained model: DDIM with guidance against the text-and-context-dropped
/// branch; the query is the hint. A model without a context encoder, or drop_context, runs with the
/// null context vector.
inline Generator model_generator(const IclModel<float>& model, const Schedule& sched, int steps, double scale,
                                 bool drop_context = false) {
    return [&model, sched, steps, scale, drop_context](const std::vector<GenRequest>& reqs) {
        std::vector<Image> out;
        if (reqs.empty()) {
            return out;
        }
        NoGradGuard no_grad;
        std::vector<CondRequest> cr;
        std::vector<uint64_t> seeds;
        for (auto& r : reqs) {
            CondRequest c;
            c.prompt          = r.prompt;
            c.context         = r.context;
            c.context_dropped = drop_context || !model.context;
            c.hint            = r.query;
            cr.push_back(std::move(c));
            seeds.push_back(r.seed);
        }
        const auto B = static_cast<int64_t>(reqs.size());
        const int64_t H = image_height(reqs[0].query), W = image_width(reqs[0].query);
        auto cond = model.condition(cr);
        std::optional<ConditioningBundle<float>> uncond;
        if (scale != 1.0) {
            uncond = model.condition(IclModel<float>::unconditional(cr));
        }
        auto run = [&](const ConditioningBundle<float>& c) {
            return [&model, &c, B](const Tensor<float>& z, int t) {
                return model.predict(constant(z), std::vector<int>(static_cast<size_t>(B), t), c).value();
            };
        };
        std::function<Tensor<float>(const Tensor<float>&, int)> fc = run(cond);
        std::function<Tensor<float>(const Tensor<float>&, int)> fu;
        if (uncond) {
            fu = run(*uncond);
        }
        Tensor<float> x = ddim_sample(sched, initial_noise<float>({B, 3, H, W}, seeds), steps, scale, fc, fu);
        const int64_t per = 3 * H * W;
        for (int64_t b = 0; b < B; b++) {
            Image img = make_image(H, W);
            std::copy_n(x.ptr() + b * per, per, img.ptr());
            out.push_back(std::move(img));
        }
        return out;
    };
}

enum class ContextSource { matched, mismatched };

inline std::string context_source_name(ContextSource s) { return s == ContextSource::matched ? "matched" : "mismatched"; }

/// Task whose pairs serve as the wrong demonstration: the next annotator in its split, same direction.
inline TaskSpec mismatched_task(const TaskSpec& t) {
    auto next = [](Annotator a) {
        switch (a) {
            case Annotator::edge: return Annotator::seg;
            case Annotator::seg: return Annotator::depth;
            case Annotator::depth: return Annotator::blur;
            case Annotator::blur: return Annotator::edge;
            case Annotator::invert: return Annotator::dilate;
            case Annotator::dilate: return Annotator::invert;
        }
        return a;
    };
    return TaskSpec{next(t.annotator), t.direction};
}

struct QueryRecord {
    int64_t index = 0;
    uint64_t seed = 0;
    double rmse   = 0;  // against the true map (img2map) or the input map after re-annotation (map2img)
    double rmse_to_query = 0;  // output vs query, the "did nothing" reference
};

struct EvalReport {
    std::string task;
    std::string mode;
    std::string context_source = "matched";
    int n = 0;
    int k = 1;
    double mean = 0;
    double std  = 0;
    double mean_to_query = 0;
    std::string config_hash;
    std::vector<QueryRecord> records;
};

struct EvalOptions {
    int n                 = 256;
    int k                 = 1;
    uint64_t seed         = 1;
    int batch             = 64;
    ContextSource source  = ContextSource::matched;
    CorpusConfig corpus;
    std::string config_hash;
    std::optional<std::filesystem::path> contact_sheet;  // PNG path
    int contact_rows = 8;
};

/// The n evaluation items of a task, drawn from the test seed space. Query seeds depend only on
/// (seed, task, index), so matched and mismatched runs see the same queries.
inline std::vector<DatasetItem> eval_items(const TaskSpec& task, const EvalOptions& o) {
    CorpusConfig cfg = o.corpus;
    cfg.seed_space   = SeedSpace::test;
    std::vector<DatasetItem> items;
    for (int i = 0; i < o.n; i++) {
        Rng rng(derive_seed(o.seed, "eval/" + task.name(), static_cast<uint64_t>(i)));
        DatasetItem it = make_item(rng, task, o.k, cfg);
        if (o.source == ContextSource::mismatched) {
            Rng other(derive_seed(o.seed, "eval/mismatch/" + task.name(), static_cast<uint64_t>(i)));
            it.context = make_item(other, mismatched_task(task), o.k, cfg).context;
        }
        items.push_back(std::move(it));
    }
    return items;
}

/// Rows of (context source | context target | query | target | output).
inline Image contact_sheet(const std::vector<DatasetItem>& items, const std::vector<Image>& outputs, int rows) {
    std::vector<std::vector<Image>> grid;
    for (size_t i = 0; i < items.size() && static_cast<int>(i) < rows; i++) {
        const auto& it = items[i];
        grid.push_back({it.context[0].source, it.context[0].target, it.query, it.target, outputs[i]});
    }
    return tile_images(grid);
}

namespace detail {

inline EvalReport evaluate(const Generator& gen, const TaskSpec& task, PromptMode mode, const EvalOptions& o) {
    if (o.n < 1 || o.k < 1 || o.batch < 1) {
        throw std::invalid_argument("evaluation: n, k and batch must be >= 1");
    }
    const auto items = eval_items(task, o);
    std::vector<Image> outputs;
    for (size_t start = 0; start < items.size(); start += static_cast<size_t>(o.batch)) {
        std::vector<GenRequest> reqs;
        for (size_t i = start; i < std::min(items.size(), start + static_cast<size_t>(o.batch)); i++) {
            reqs.push_back({items[i].context, items[i].query, build_prompt(task, items[i].caption, mode),
                            derive_seed(o.seed, "eval/sample", static_cast<uint64_t>(i))});
        }
        auto outs = gen(reqs);
        if (outs.size() != reqs.size()) {
            throw std::runtime_error("evaluation: generator returned " + std::to_string(outs.size()) + " images for " +
                                     std::to_string(reqs.size()) + " requests");
        }
        for (auto& im : outs) {
            outputs.push_back(std::move(im));
        }
    }
    EvalReport r;
    r.task           = task.name();
    r.mode           = prompt_mode_name(mode);
    r.context_source = context_source_name(o.source);
    r.n              = o.n;
    r.k              = o.k;
    r.config_hash    = o.config_hash;
    double s = 0, s2 = 0, sq = 0;
    for (size_t i = 0; i < items.size(); i++) {
        QueryRecord q;
        q.index = static_cast<int64_t>(i);
        q.seed  = items[i].seed;
        if (task.direction == Direction::img2map) {
            q.rmse = rmse(outputs[i], items[i].target);
        } else {
            q.rmse = rmse(annotate(outputs[i], nullptr, task.annotator, o.corpus), items[i].query);
        }
        q.rmse_to_query = rmse(outputs[i], items[i].query);
        s += q.rmse;
        s2 += q.rmse * q.rmse;
        sq += q.rmse_to_query;
        r.records.push_back(q);
    }
    const double n  = static_cast<double>(items.size());
    r.mean          = s / n;
    r.std           = std::sqrt(std::max(0.0, s2 / n - r.mean * r.mean));
    r.mean_to_query = sq / n;
    if (o.contact_sheet) {
        write_png(*o.contact_sheet, contact_sheet(items, outputs, o.contact_rows));
    }
    return r;
}

}  // namespace detail

/// RMSE between generated and true condition maps.
inline EvalReport eval_img2map(const Generator& gen, const TaskSpec& task, PromptMode mode, const EvalOptions& o) {
    if (task.direction != Direction::img2map) {
        throw std::invalid_argument("eval_img2map: " + task.name() + " is not an image-to-map task");
    }
    return detail::evaluate(gen, task, mode, o);
}

/// Cycle consistency: re-annotate the generated image and compare with the input map. Only annotators
/// computable from pixels alone qualify (edge, blur, invert, dilate).
inline EvalReport eval_map2img_cycle(const Generator& gen, const TaskSpec& task, PromptMode mode, const EvalOptions& o) {
    if (task.direction != Direction::map2img) {
        throw std::invalid_argument("eval_map2img_cycle: " + task.name() + " is not a map-to-image task");
    }
    if (task.annotator == Annotator::seg || task.annotator == Annotator::depth) {
        throw std::invalid_argument("eval_map2img_cycle: " + annotator_name(task.annotator) +
                                    " needs scene geometry and cannot re-annotate a generated image");
    }
    return detail::evaluate(gen, task, mode, o);
}

inline EvalReport eval_task(const Generator& gen, const TaskSpec& task, PromptMode mode, const EvalOptions& o) {
    return task.direction == Direction::img2map ? eval_img2map(gen, task, mode, o) : eval_map2img_cycle(gen, task, mode, o);
}

// ---------------------------------------------------------------- probe

/// Nearest-centroid accuracy. For each class the first floor(M/2) samples form the centroid and the
/// rest are classified. Ties go to the lower class index.
inline double nearest_centroid_accuracy(const std::vector<std::vector<std::vector<double>>>& by_class) {
    const size_t C = by_class.size();
    if (C < 2) {
        throw std::invalid_argument("probe: need at least two classes");
    }
    std::vector<std::vector<double>> centroids(C);
    for (size_t c = 0; c < C; c++) {
        const auto& xs = by_class[c];
        if (xs.size() < 2) {
            throw std::invalid_argument("probe: need at least two samples per class");
        }
        const size_t half = xs.size() / 2;
        centroids[c].assign(xs[0].size(), 0.0);
        for (size_t i = 0; i < half; i++) {
            for (size_t j = 0; j < xs[i].size(); j++) {
                centroids[c][j] += xs[i][j] / static_cast<double>(half);
            }
        }
    }
    int64_t correct = 0, total = 0;
    for (size_t c = 0; c < C; c++) {
        const auto& xs = by_class[c];
        for (size_t i = xs.size() / 2; i < xs.size(); i++) {
            size_t best   = 0;
            double best_d = INFINITY;
            for (size_t k = 0; k < C; k++) {
                double d = 0;
                for (size_t j = 0; j < xs[i].size(); j++) {
                    const double t = xs[i][j] - centroids[k][j];
                    d += t * t;
                }
                if (d < best_d) {
                    best_d = d;
                    best   = k;
                }
            }
            correct += best == c;
            total++;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(total);
}

struct Pca2 {
    std::array<std::vector<double>, 2> components;  // unit directions, largest variance first
    std::vector<std::array<double, 2>> coords;
};

inline Pca2 pca_2d(const std::vector<std::vector<double>>& X) {
    if (X.size() < 2) {
        throw std::invalid_argument("pca: need at least two points");
    }
    const auto N = static_cast<Eigen::Index>(X.size());
    const auto D = static_cast<Eigen::Index>(X[0].size());
    if (D < 2) {
        throw std::invalid_argument("pca: need at least two dimensions");
    }
    Eigen::MatrixXd M(N, D);
    for (Eigen::Index i = 0; i < N; i++) {
        check_shape(static_cast<Eigen::Index>(X[static_cast<size_t>(i)].size()) == D, "pca: ragged input");
        for (Eigen::Index j = 0; j < D; j++) {
            M(i, j) = X[static_cast<size_t>(i)][static_cast<size_t>(j)];
        }
    }
    M.rowwise() -= M.colwise().mean();
    const Eigen::MatrixXd cov = (M.transpose() * M) / static_cast<double>(N - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    Pca2 p;
    for (int c = 0; c < 2; c++) {
        Eigen::VectorXd v = es.eigenvectors().col(D - 1 - c);
        p.components[static_cast<size_t>(c)].assign(v.data(), v.data() + D);
    }
    const Eigen::MatrixXd proj = M * es.eigenvectors().rightCols(2).rowwise().reverse();
    for (Eigen::Index i = 0; i < N; i++) {
        p.coords.push_back({proj(i, 0), proj(i, 1)});
    }
    return p;
}

struct ProbeResult {
    double accuracy = 0;
    std::vector<std::string> labels;  // one per embedding, task name
    std::vector<std::vector<double>> embeddings;
    Pca2 pca;
};

/// Context embeddings of m single pairs per directed training task (test seeds), classified by
/// nearest centroid and projected to 2D.
inline ProbeResult probe_embeddings(const IclModel<float>& model, int m, uint64_t seed, CorpusConfig cfg) {
    if (!model.context) {
        throw CheckpointError("probe: model has no context encoder");
    }
    if (m < 2) {
        throw std::invalid_argument("probe: m must be >= 2");
    }
    cfg.seed_space = SeedSpace::test;
    NoGradGuard no_grad;
    ProbeResult res;
    std::vector<std::vector<std::vector<double>>> by_class;
    for (auto& task : tasks_of(Split::train)) {
        std::vector<ImagePair> pairs;
        Rng rng(derive_seed(seed, "probe/" + task.name()));
        for (int i = 0; i < m; i++) {
            pairs.push_back(realize_task(draw_scene_seed(rng, cfg.seed_space), task, cfg).first);
        }
        std::vector<const Image*> src, tgt;
        for (auto& p : pairs) {
            src.push_back(&p.source);
            tgt.push_back(&p.target);
        }
        auto e = model.context->encode_pairs(constant(stack_model_space<float>(src)), constant(stack_model_space<float>(tgt)));
        const int64_t d = e.shape()[1];
        by_class.emplace_back();
        for (int i = 0; i < m; i++) {
            std::vector<double> row(e.value().ptr() + i * d, e.value().ptr() + (i + 1) * d);
            by_class.back().push_back(row);
            res.embeddings.push_back(row);
            res.labels.push_back(task.name());
        }
    }
    res.accuracy = nearest_centroid_accuracy(by_class);
    res.pca      = pca_2d(res.embeddings);
    return res;
}

inline std::string projection_csv(const ProbeResult& r) {
    std::ostringstream os;
    os.precision(9);
    os << "task,x,y\n";
    for (size_t i = 0; i < r.labels.size(); i++) {
        os << r.labels[i] << "," << r.pca.coords[i][0] << "," << r.pca.coords[i][1] << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------- suite

struct EvalSpec {
    std::vector<TaskSpec> tasks;
    std::vector<PromptMode> modes;
    EvalOptions options;
    std::optional<std::filesystem::path> contact_dir;  // one sheet per cell when set
};

struct SuiteResult {
    std::string table_csv;   // checkpoint,mode,<task...>
    std::string detail_csv;  // one row per cell
    std::vector<EvalReport> reports;
};

inline std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

/// Cross product of generators x modes x tasks. The table has one row per (checkpoint, mode) and one
/// RMSE-mean column per task.
inline SuiteResult run_suite(const std::vector<std::pair<std::string, Generator>>& gens, const EvalSpec& spec) {
    SuiteResult res;
    std::string header = "checkpoint,mode";
    for (auto& t : spec.tasks) {
        header += "," + t.name();
    }
    res.table_csv  = header + "\n";
    res.detail_csv = "checkpoint,task,mode,context,n,k,rmse_mean,rmse_std,rmse_to_query,config_hash\n";
    if (spec.tasks.empty()) {
        return res;
    }
    for (auto& [name, gen] : gens) {
        for (auto mode : spec.modes) {
            std::string row = name + "," + prompt_mode_name(mode);
            for (auto& task : spec.tasks) {
                EvalOptions o = spec.options;
                if (spec.contact_dir) {
                    std::string base = name;
                    for (auto& ch : base) {
                        if (!std::isalnum(static_cast<unsigned char>(ch)) && ch != '-' && ch != '_') ch = '_';
                    }
                    o.contact_sheet = *spec.contact_dir / (base + "_" + task.name() + "_" + prompt_mode_name(mode) + ".png");
                }
                EvalReport r = eval_task(gen, task, mode, o);
                row += "," + format_real(r.mean);
                res.detail_csv += name + "," + r.task + "," + r.mode + "," + r.context_source + "," + std::to_string(r.n) +
                                  "," + std::to_string(r.k) + "," + format_real(r.mean) + "," + format_real(r.std) + "," +
                                  format_real(r.mean_to_query) + "," + r.config_hash + "\n";
                res.reports.push_back(std::move(r));
            }
            res.table_csv += row + "\n";
        }
    }
    return res;
}

}  // namespace icl
