#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "image.hpp"
#include "parallel.hpp"
#include "rng.hpp"

// Procedural scenes, deterministic annotators and directed-task datasets.

namespace icl {

enum class ShapeClass { circle = 0, square = 1, triangle = 2 };
enum class Annotator { edge = 0, seg = 1, depth = 2, blur = 3, invert = 4, dilate = 5 };
enum class Direction { img2map = 0, map2img = 1 };
enum class Split { train = 0, heldout = 1 };
enum class SeedSpace { train = 0, test = 1 };

struct NamedColor {
    const char* name;
    float r, g, b;
};

/// Scene palette. Every pair differs by more than 0.25 in at least one channel. Channel values are
/// multiples of 1/64 so that 1 - x is exact and invert is an exact involution.
inline const std::array<NamedColor, 10>& palette() {
    constexpr float q = 1.0f / 64.0f;
    static const std::array<NamedColor, 10> colors = {{
        {"black", 0.0f, 0.0f, 0.0f},
        {"white", 1.0f, 1.0f, 1.0f},
        {"red", 58 * q, 6 * q, 6 * q},
        {"green", 6 * q, 51 * q, 13 * q},
        {"blue", 6 * q, 13 * q, 58 * q},
        {"yellow", 61 * q, 58 * q, 6 * q},
        {"cyan", 6 * q, 54 * q, 58 * q},
        {"magenta", 58 * q, 6 * q, 54 * q},
        {"orange", 1.0f, 35 * q, 3 * q},
        {"gray", 0.5f, 0.5f, 0.5f},
    }};
    return colors;
}

inline const char* shape_class_name(ShapeClass c) {
    switch (c) {
        case ShapeClass::circle: return "circle";
        case ShapeClass::square: return "square";
        case ShapeClass::triangle: return "triangle";
    }
    return "?";
}

inline const std::array<Annotator, 6>& all_annotators() {
    static const std::array<Annotator, 6> a = {Annotator::edge, Annotator::seg, Annotator::depth,
                                               Annotator::blur, Annotator::invert, Annotator::dilate};
    return a;
}

inline std::string annotator_name(Annotator a) {
    switch (a) {
        case Annotator::edge: return "edge";
        case Annotator::seg: return "seg";
        case Annotator::depth: return "depth";
        case Annotator::blur: return "blur";
        case Annotator::invert: return "invert";
        case Annotator::dilate: return "dilate";
    }
    throw std::invalid_argument("unknown annotator id " + std::to_string(static_cast<int>(a)));
}

inline Annotator parse_annotator(std::string_view s) {
    for (auto a : all_annotators()) {
        if (annotator_name(a) == s) {
            return a;
        }
    }
    throw std::invalid_argument("unknown annotator '" + std::string(s) + "'");
}

/// Word used for the annotator inside prompts.
inline std::string annotator_word(Annotator a) {
    return a == Annotator::seg ? "segmentation" : annotator_name(a);
}

/// Split membership is a pure function of the annotator.
inline Split split_of(Annotator a) {
    switch (a) {
        case Annotator::edge:
        case Annotator::seg:
        case Annotator::depth:
        case Annotator::blur: return Split::train;
        case Annotator::invert:
        case Annotator::dilate: return Split::heldout;
    }
    throw std::invalid_argument("unknown annotator id " + std::to_string(static_cast<int>(a)));
}

inline std::string split_name(Split s) { return s == Split::train ? "train" : "heldout"; }

struct TaskSpec {
    Annotator annotator = Annotator::edge;
    Direction direction = Direction::img2map;

    Split split() const { return split_of(annotator); }

    /// Unique identifier, e.g. "img2edge" or "edge2img".
    std::string name() const {
        return direction == Direction::img2map ? "img2" + annotator_name(annotator) : annotator_name(annotator) + "2img";
    }

    /// Task name as it appears in prompts, e.g. "edge map" or "image from edge map".
    std::string prompt_name() const {
        std::string m = annotator_word(annotator) + " map";
        return direction == Direction::img2map ? m : "image from " + m;
    }

    bool operator==(const TaskSpec& o) const { return annotator == o.annotator && direction == o.direction; }
    bool operator<(const TaskSpec& o) const { return name() < o.name(); }

    static TaskSpec parse(std::string_view s) {
        for (auto a : all_annotators()) {
            for (auto d : {Direction::img2map, Direction::map2img}) {
                TaskSpec t{a, d};
                if (t.name() == s) {
                    return t;
                }
            }
        }
        throw std::invalid_argument("unknown task '" + std::string(s) + "'");
    }
};

/// All directed tasks of a split, in annotator order with img2map first.
inline std::vector<TaskSpec> tasks_of(Split split) {
    std::vector<TaskSpec> out;
    for (auto a : all_annotators()) {
        if (split_of(a) != split) {
            continue;
        }
        out.push_back({a, Direction::img2map});
        out.push_back({a, Direction::map2img});
    }
    return out;
}

inline std::vector<TaskSpec> all_tasks() {
    auto t = tasks_of(Split::train);
    auto h = tasks_of(Split::heldout);
    t.insert(t.end(), h.begin(), h.end());
    return t;
}

struct CorpusConfig {
    int image_size        = 32;
    int min_shapes        = 1;
    int max_shapes        = 4;
    int min_shape_size    = 0;  // 0: image_size / 5, at least 3
    int max_shape_size    = 0;  // 0: image_size / 2
    double blur_sigma     = 1.5;
    int blur_radius       = 4;
    int dilate_iterations = 2;
    float edge_threshold  = 0.1f;  // image-only edge detection
    int k                 = 1;
    int max_k             = 4;
    int64_t count         = 0;     // items per directed task
    std::vector<std::string> tasks;  // empty: all directed tasks
    SeedSpace seed_space = SeedSpace::train;

    int shape_size_lo() const { return min_shape_size > 0 ? min_shape_size : std::max(3, image_size / 5); }
    int shape_size_hi() const { return max_shape_size > 0 ? max_shape_size : image_size / 2; }

    std::vector<TaskSpec> task_list() const {
        if (tasks.empty()) {
            return all_tasks();
        }
        std::vector<TaskSpec> out;
        for (auto& t : tasks) {
            out.push_back(TaskSpec::parse(t));
        }
        return out;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("corpus: " + m); };
        if (image_size < 8) fail("image_size must be >= 8");
        if (min_shapes < 1 || max_shapes > 4 || min_shapes > max_shapes) fail("shape count range must satisfy 1 <= min <= max <= 4");
        if (shape_size_lo() < 2 || shape_size_lo() > shape_size_hi() || shape_size_hi() > image_size)
            fail("shape size range invalid");
        if (blur_sigma <= 0 || blur_radius < 1 || blur_radius >= image_size) fail("blur parameters invalid");
        if (dilate_iterations < 0) fail("dilate_iterations must be >= 0");
        if (max_k < 1 || k < 1 || k > max_k) fail("k must lie in [1, max_k]");
        if (count < 0) fail("count must be >= 0");
        try {
            (void)task_list();
        } catch (const std::invalid_argument& e) {
            fail(e.what());
        }
    }
};

struct ShapeSpec {
    ShapeClass cls = ShapeClass::square;
    int x0 = 0, y0 = 0;  // top-left of the bounding box
    int size = 1;        // bounding box side in pixels
    int color = 0;       // palette index
    int z = 0;           // drawing order, back to front

    double cx() const { return x0 + size / 2.0; }
    double cy() const { return y0 + size / 2.0; }

    /// Coverage test at the pixel centre (px + 0.5, py + 0.5).
    bool covers(int px, int py) const {
        const double x = px + 0.5, y = py + 0.5;
        switch (cls) {
            case ShapeClass::square: return px >= x0 && px < x0 + size && py >= y0 && py < y0 + size;
            case ShapeClass::circle: {
                const double r = size / 2.0, dx = x - cx(), dy = y - cy();
                return dx * dx + dy * dy <= r * r;
            }
            case ShapeClass::triangle: {
                // Apex at top centre, base along the bottom edge of the bounding box.
                const double ax = cx(), ay = y0, bx = x0, by = y0 + size, qx = x0 + size, qy = y0 + size;
                auto edge = [&](double x1, double y1, double x2, double y2) {
                    return (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1);
                };
                const double e0 = edge(ax, ay, bx, by), e1 = edge(bx, by, qx, qy), e2 = edge(qx, qy, ax, ay);
                return (e0 <= 0 && e1 <= 0 && e2 <= 0) || (e0 >= 0 && e1 >= 0 && e2 >= 0);
            }
        }
        return false;
    }
};

struct Scene {
    uint64_t seed = 0;
    int width = 0, height = 0;
    int background = 0;  // palette index
    std::vector<ShapeSpec> shapes;

    /// Shape indices sorted back to front.
    std::vector<int> draw_order() const {
        std::vector<int> idx(shapes.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return shapes[a].z < shapes[b].z; });
        return idx;
    }

    /// Visible shape index per pixel (row-major), -1 for background.
    std::vector<int> id_map() const {
        std::vector<int> ids(static_cast<size_t>(width * height), -1);
        for (int s : draw_order()) {
            const auto& sh = shapes[static_cast<size_t>(s)];
            for (int y = std::max(0, sh.y0); y < std::min(height, sh.y0 + sh.size); y++) {
                for (int x = std::max(0, sh.x0); x < std::min(width, sh.x0 + sh.size); x++) {
                    if (sh.covers(x, y)) {
                        ids[static_cast<size_t>(y * width + x)] = s;
                    }
                }
            }
        }
        return ids;
    }

    /// Template caption, e.g. "two shapes red circle blue square on gray background".
    std::string caption() const {
        static const char* counts[] = {"zero", "one", "two", "three", "four"};
        std::string c = std::string(counts[std::min<size_t>(shapes.size(), 4)]) + (shapes.size() == 1 ? " shape" : " shapes");
        for (auto& s : shapes) {
            c += std::string(" ") + palette()[static_cast<size_t>(s.color)].name + " " + shape_class_name(s.cls);
        }
        c += std::string(" on ") + palette()[static_cast<size_t>(background)].name + " background";
        return c;
    }
};

inline uint64_t draw_scene_seed(Rng& rng, SeedSpace space) {
    uint64_t r = rng.next_u64() >> 2;
    return space == SeedSpace::test ? (r | (1ULL << 63)) : r;
}

inline SeedSpace seed_space_of(uint64_t seed) { return (seed >> 63) ? SeedSpace::test : SeedSpace::train; }

/// Deterministic scene synthesis and rasterization; returns the scene and its rendering in [0, 1].
inline std::pair<Scene, Image> render_scene(uint64_t seed, const CorpusConfig& cfg) {
    Rng rng(seed);
    Scene scene;
    scene.seed   = seed;
    scene.width  = cfg.image_size;
    scene.height = cfg.image_size;
    const int ncolors = static_cast<int>(palette().size());
    scene.background  = static_cast<int>(rng.uniform_int(0, ncolors - 1));
    const int n       = static_cast<int>(rng.uniform_int(cfg.min_shapes, cfg.max_shapes));
    std::vector<int> free_colors;
    for (int c = 0; c < ncolors; c++) {
        if (c != scene.background) {
            free_colors.push_back(c);
        }
    }
    for (int i = 0; i < n; i++) {
        ShapeSpec s;
        s.cls   = static_cast<ShapeClass>(rng.uniform_int(0, 2));
        s.size  = static_cast<int>(rng.uniform_int(cfg.shape_size_lo(), cfg.shape_size_hi()));
        s.x0    = static_cast<int>(rng.uniform_int(0, cfg.image_size - s.size));
        s.y0    = static_cast<int>(rng.uniform_int(0, cfg.image_size - s.size));
        auto ci = static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(free_colors.size()) - 1));
        s.color = free_colors[ci];
        free_colors.erase(free_colors.begin() + static_cast<long>(ci));
        s.z = i;
        scene.shapes.push_back(s);
    }
    for (int i = n - 1; i > 0; i--) {
        auto j = static_cast<size_t>(rng.uniform_int(0, i));
        std::swap(scene.shapes[static_cast<size_t>(i)].z, scene.shapes[j].z);
    }

    const auto ids = scene.id_map();
    Image img      = make_image(scene.height, scene.width);
    for (int y = 0; y < scene.height; y++) {
        for (int x = 0; x < scene.width; x++) {
            int id  = ids[static_cast<size_t>(y * scene.width + x)];
            int col = id < 0 ? scene.background : scene.shapes[static_cast<size_t>(id)].color;
            const auto& c = palette()[static_cast<size_t>(col)];
            pixel(img, 0, y, x) = c.r;
            pixel(img, 1, y, x) = c.g;
            pixel(img, 2, y, x) = c.b;
        }
    }
    return {scene, img};
}

namespace detail {

inline Image mask_to_image(const std::vector<uint8_t>& mask, int64_t H, int64_t W) {
    Image out = make_image(H, W);
    for (int64_t c = 0; c < 3; c++) {
        for (int64_t i = 0; i < H * W; i++) {
            out[c * H * W + i] = mask[static_cast<size_t>(i)] ? 1.0f : 0.0f;
        }
    }
    return out;
}

/// Marks pixels whose label differs from any in-canvas 4-neighbour.
template <typename Differs>
std::vector<uint8_t> boundary_mask(int64_t H, int64_t W, Differs&& differs) {
    std::vector<uint8_t> m(static_cast<size_t>(H * W), 0);
    const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
    for (int64_t y = 0; y < H; y++) {
        for (int64_t x = 0; x < W; x++) {
            for (int k = 0; k < 4; k++) {
                int64_t ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || ny >= H || nx < 0 || nx >= W) {
                    continue;
                }
                if (differs(y * W + x, ny * W + nx)) {
                    m[static_cast<size_t>(y * W + x)] = 1;
                    break;
                }
            }
        }
    }
    return m;
}

inline std::vector<uint8_t> dilate_mask(std::vector<uint8_t> m, int64_t H, int64_t W, int iterations) {
    for (int it = 0; it < iterations; it++) {
        std::vector<uint8_t> next(m.size(), 0);
        for (int64_t y = 0; y < H; y++) {
            for (int64_t x = 0; x < W; x++) {
                uint8_t v = 0;
                for (int64_t yy = std::max<int64_t>(0, y - 1); yy <= std::min(H - 1, y + 1) && !v; yy++) {
                    for (int64_t xx = std::max<int64_t>(0, x - 1); xx <= std::min(W - 1, x + 1); xx++) {
                        if (m[static_cast<size_t>(yy * W + xx)]) {
                            v = 1;
                            break;
                        }
                    }
                }
                next[static_cast<size_t>(y * W + x)] = v;
            }
        }
        m = std::move(next);
    }
    return m;
}

inline int64_t reflect_index(int64_t i, int64_t n) {
    if (i < 0) {
        return -i;
    }
    if (i >= n) {
        return 2 * (n - 1) - i;
    }
    return i;
}

}  // namespace detail

/// Separable Gaussian blur with reflect padding; accumulates in double in fixed order.
inline Image gaussian_blur(const Image& img, double sigma, int radius) {
    check_image(img, "gaussian_blur");
    const int64_t H = img.shape[1], W = img.shape[2];
    std::vector<double> k(static_cast<size_t>(2 * radius + 1));
    double total = 0;
    for (int i = -radius; i <= radius; i++) {
        k[static_cast<size_t>(i + radius)] = std::exp(-(i * i) / (2.0 * sigma * sigma));
        total += k[static_cast<size_t>(i + radius)];
    }
    for (auto& v : k) {
        v /= total;
    }
    Image out = make_image(H, W);
    std::vector<double> tmp(static_cast<size_t>(H * W));
    for (int64_t c = 0; c < 3; c++) {
        for (int64_t y = 0; y < H; y++) {
            for (int64_t x = 0; x < W; x++) {
                double s = 0;
                for (int i = -radius; i <= radius; i++) {
                    s += k[static_cast<size_t>(i + radius)] * pixel(img, c, y, detail::reflect_index(x + i, W));
                }
                tmp[static_cast<size_t>(y * W + x)] = s;
            }
        }
        for (int64_t y = 0; y < H; y++) {
            for (int64_t x = 0; x < W; x++) {
                double s = 0;
                for (int i = -radius; i <= radius; i++) {
                    s += k[static_cast<size_t>(i + radius)] * tmp[static_cast<size_t>(detail::reflect_index(y + i, H) * W + x)];
                }
                pixel(out, c, y, x) = static_cast<float>(std::clamp(s, 0.0, 1.0));
            }
        }
    }
    return out;
}

/// Boundary map of an image alone: a pixel is marked when some channel differs from a 4-neighbour by
/// more than threshold. Used to re-annotate generated images, which carry no scene.
inline Image edges_from_image(const Image& img, float threshold) {
    check_image(img, "edges_from_image");
    const int64_t H = img.shape[1], W = img.shape[2];
    auto m = detail::boundary_mask(H, W, [&](int64_t a, int64_t b) {
        for (int64_t c = 0; c < 3; c++) {
            if (std::abs(img[c * H * W + a] - img[c * H * W + b]) > threshold) {
                return true;
            }
        }
        return false;
    });
    return detail::mask_to_image(m, H, W);
}

/// Condition map of `image` under `annotator`. Edge, seg, depth and dilate read the scene's shape-id map;
/// without a scene, edge and dilate fall back to image-only boundary detection and seg/depth are rejected.
inline Image annotate(const Image& image, const Scene* scene, Annotator annotator, const CorpusConfig& cfg) {
    check_image(image, "annotate");
    const int64_t H = image.shape[1], W = image.shape[2];
    auto scene_edges = [&]() {
        auto ids = scene->id_map();
        return detail::boundary_mask(H, W, [&](int64_t a, int64_t b) {
            return ids[static_cast<size_t>(a)] != ids[static_cast<size_t>(b)];
        });
    };
    auto need_scene = [&](const char* what) {
        if (!scene) {
            throw std::invalid_argument(std::string(what) + " annotator requires the symbolic scene");
        }
        check_shape(scene->width == W && scene->height == H, "annotate: scene size does not match image");
    };
    switch (annotator) {
        case Annotator::edge:
            if (!scene) {
                return edges_from_image(image, cfg.edge_threshold);
            }
            need_scene("edge");
            return detail::mask_to_image(scene_edges(), H, W);
        case Annotator::dilate: {
            if (!scene) {
                auto e = edges_from_image(image, cfg.edge_threshold);
                std::vector<uint8_t> m(static_cast<size_t>(H * W));
                for (int64_t i = 0; i < H * W; i++) {
                    m[static_cast<size_t>(i)] = e[i] > 0.5f;
                }
                return detail::mask_to_image(detail::dilate_mask(m, H, W, cfg.dilate_iterations), H, W);
            }
            need_scene("dilate");
            return detail::mask_to_image(detail::dilate_mask(scene_edges(), H, W, cfg.dilate_iterations), H, W);
        }
        case Annotator::seg: {
            need_scene("seg");
            auto ids  = scene->id_map();
            Image out = make_image(H, W);
            for (int64_t i = 0; i < H * W; i++) {
                int id = ids[static_cast<size_t>(i)];
                if (id >= 0) {
                    out[static_cast<int>(scene->shapes[static_cast<size_t>(id)].cls) * H * W + i] = 1.0f;
                }
            }
            return out;
        }
        case Annotator::depth: {
            need_scene("depth");
            auto ids   = scene->id_map();
            auto order = scene->draw_order();
            std::vector<float> level(scene->shapes.size());
            const float n = static_cast<float>(scene->shapes.size());
            for (size_t r = 0; r < order.size(); r++) {
                level[static_cast<size_t>(order[r])] = static_cast<float>(r + 1) / (n + 1.0f);
            }
            Image out = make_image(H, W);
            for (int64_t i = 0; i < H * W; i++) {
                int id  = ids[static_cast<size_t>(i)];
                float v = id < 0 ? 0.0f : level[static_cast<size_t>(id)];
                for (int64_t c = 0; c < 3; c++) {
                    out[c * H * W + i] = v;
                }
            }
            return out;
        }
        case Annotator::blur: return gaussian_blur(image, cfg.blur_sigma, cfg.blur_radius);
        case Annotator::invert: {
            Image out(image.shape);
            for (int64_t i = 0; i < image.size(); i++) {
                out[i] = 1.0f - image[i];
            }
            return out;
        }
    }
    throw std::invalid_argument("unknown annotator id " + std::to_string(static_cast<int>(annotator)));
}

inline Image annotate(const Image& image, const Scene& scene, Annotator annotator, const CorpusConfig& cfg) {
    return annotate(image, &scene, annotator, cfg);
}

/// Pixelwise convex combination of condition maps, clamped to [0, 1].
inline Image mix_maps(const std::vector<Image>& maps, const std::vector<double>& weights) {
    if (maps.empty() || maps.size() != weights.size()) {
        throw std::invalid_argument("mix_maps: need one weight per map and at least one map");
    }
    double total = 0;
    for (double w : weights) {
        if (w < 0) {
            throw std::invalid_argument("mix_maps: negative weight");
        }
        total += w;
    }
    if (std::abs(total - 1.0) > 1e-6) {
        throw std::invalid_argument("mix_maps: weights sum to " + std::to_string(total) + ", expected 1");
    }
    for (auto& m : maps) {
        check_shape(m.shape == maps[0].shape, "mix_maps: shape mismatch " + shape_str(m.shape) + " vs " +
                                                  shape_str(maps[0].shape));
    }
    Image out(maps[0].shape);
    for (int64_t i = 0; i < out.size(); i++) {
        double s = 0;
        for (size_t j = 0; j < maps.size(); j++) {
            s += weights[j] * maps[j][i];
        }
        out[i] = static_cast<float>(std::clamp(s, 0.0, 1.0));
    }
    return out;
}

struct ImagePair {
    Image source;
    Image target;
};

struct DatasetItem {
    std::string id;
    Image query;
    Image target;
    std::vector<ImagePair> context;
    TaskSpec task;
    std::string caption;
    uint64_t seed = 0;
    std::vector<uint64_t> context_seeds;
};

/// (source, target) realization of a task on one scene, plus the scene caption.
inline std::pair<ImagePair, std::string> realize_task(uint64_t seed, const TaskSpec& task, const CorpusConfig& cfg) {
    auto [scene, img] = render_scene(seed, cfg);
    Image map         = annotate(img, scene, task.annotator, cfg);
    std::string cap   = task.direction == Direction::img2map ? task.prompt_name() : scene.caption();
    if (task.direction == Direction::img2map) {
        return {{std::move(img), std::move(map)}, cap};
    }
    return {{std::move(map), std::move(img)}, cap};
}

/// Samples k+1 distinct scene seeds: the first is the query, the rest feed the context pairs.
inline DatasetItem make_item(Rng& rng, const TaskSpec& task, int k, const CorpusConfig& cfg) {
    if (k < 1) {
        throw std::invalid_argument("make_item: k must be >= 1");
    }
    std::vector<uint64_t> seeds;
    while (static_cast<int>(seeds.size()) < k + 1) {
        uint64_t s = draw_scene_seed(rng, cfg.seed_space);
        if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) {
            seeds.push_back(s);
        }
    }
    DatasetItem item;
    item.task        = task;
    item.seed        = seeds[0];
    auto [pair, cap] = realize_task(seeds[0], task, cfg);
    item.query       = std::move(pair.source);
    item.target      = std::move(pair.target);
    item.caption     = std::move(cap);
    for (int i = 1; i <= k; i++) {
        item.context_seeds.push_back(seeds[static_cast<size_t>(i)]);
        item.context.push_back(realize_task(seeds[static_cast<size_t>(i)], task, cfg).first);
    }
    return item;
}

struct Manifest {
    std::vector<nlohmann::json> records;
    std::map<std::string, int64_t> per_task;
};

namespace detail {

inline nlohmann::json corpus_config_json(const CorpusConfig& c) {
    return {{"image_size", c.image_size},        {"min_shapes", c.min_shapes},
            {"max_shapes", c.max_shapes},        {"min_shape_size", c.min_shape_size},
            {"max_shape_size", c.max_shape_size}, {"blur_sigma", c.blur_sigma},
            {"blur_radius", c.blur_radius},      {"dilate_iterations", c.dilate_iterations},
            {"edge_threshold", c.edge_threshold}, {"k", c.k},
            {"max_k", c.max_k},                  {"count", c.count},
            {"tasks", c.tasks},                  {"seed_space", c.seed_space == SeedSpace::train ? "train" : "test"}};
}

}  // namespace detail

/// Materializes `count` items per directed task under <out>/<task>/<split>/ plus manifest.jsonl.
inline Manifest write_corpus(const CorpusConfig& cfg, const std::filesystem::path& out_dir, uint64_t seed) {
    namespace fs = std::filesystem;
    cfg.validate();
    const auto tasks = cfg.task_list();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) {
        throw IoError("cannot create corpus directory " + out_dir.string() + ": " + ec.message());
    }
    const int64_t total = cfg.count * static_cast<int64_t>(tasks.size());
    std::vector<nlohmann::json> records(static_cast<size_t>(total));
    for (auto& t : tasks) {
        fs::create_directories(out_dir / t.name() / split_name(t.split()), ec);
        if (ec) {
            throw IoError("cannot create " + (out_dir / t.name()).string() + ": " + ec.message());
        }
    }
    parallel_for(total, [&](int64_t j) {
        const TaskSpec& task = tasks[static_cast<size_t>(j / std::max<int64_t>(1, cfg.count))];
        const int64_t i      = j % std::max<int64_t>(1, cfg.count);
        Rng rng(derive_seed(seed, task.name(), static_cast<uint64_t>(i)));
        DatasetItem item = make_item(rng, task, cfg.k, cfg);
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "%06lld", static_cast<long long>(i));
        const std::string id  = task.name() + "_" + idbuf;
        const fs::path rel    = fs::path(task.name()) / split_name(task.split());
        auto put              = [&](const Image& im, const std::string& suffix) {
            fs::path p = rel / (id + "_" + suffix + ".png");
            write_png(out_dir / p, im);
            return p.generic_string();
        };
        nlohmann::json rec;
        rec["id"]      = id;
        rec["task"]    = task.name();
        rec["split"]   = split_name(task.split());
        rec["query"]   = put(item.query, "query");
        rec["target"]  = put(item.target, "target");
        rec["context"] = nlohmann::json::array();
        for (size_t c = 0; c < item.context.size(); c++) {
            rec["context"].push_back({{"src", put(item.context[c].source, "ctx" + std::to_string(c) + "_src")},
                                      {"tgt", put(item.context[c].target, "ctx" + std::to_string(c) + "_tgt")}});
        }
        rec["caption"]       = item.caption;
        rec["seed"]          = item.seed;
        rec["context_seeds"] = item.context_seeds;
        records[static_cast<size_t>(j)] = std::move(rec);
    });

    Manifest m;
    std::ofstream mf(out_dir / "manifest.jsonl", std::ios::binary);
    if (!mf) {
        throw IoError("cannot write " + (out_dir / "manifest.jsonl").string());
    }
    for (auto& t : tasks) {
        m.per_task[t.name()] = 0;
    }
    for (auto& r : records) {
        mf << r.dump() << "\n";
        m.per_task[r["task"].get<std::string>()]++;
    }
    if (!mf) {
        throw IoError("write failed: " + (out_dir / "manifest.jsonl").string());
    }
    std::ofstream cf(out_dir / "corpus.json", std::ios::binary);
    cf << nlohmann::json{{"seed", seed}, {"corpus", detail::corpus_config_json(cfg)}}.dump(2) << "\n";
    if (!cf) {
        throw IoError("write failed: " + (out_dir / "corpus.json").string());
    }
    m.records = std::move(records);
    return m;
}

/// Streams DatasetItems back from a corpus directory, one manifest line at a time.
class CorpusReader {
public:
    explicit CorpusReader(std::filesystem::path dir) : dir_(std::move(dir)) {
        in_.open(dir_ / "manifest.jsonl", std::ios::binary);
        if (!in_) {
            throw IoError("cannot open manifest: " + (dir_ / "manifest.jsonl").string());
        }
    }

    std::optional<DatasetItem> next() {
        std::string line;
        while (std::getline(in_, line)) {
            line_no_++;
            if (line.empty()) {
                continue;
            }
            return parse(line);
        }
        return std::nullopt;
    }

    std::vector<DatasetItem> read_all() {
        std::vector<DatasetItem> out;
        while (auto it = next()) {
            out.push_back(std::move(*it));
        }
        return out;
    }

private:
    DatasetItem parse(const std::string& line) {
        auto where = [&] { return (dir_ / "manifest.jsonl").string() + ":" + std::to_string(line_no_); };
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError("malformed manifest line " + where() + ": " + e.what());
        }
        DatasetItem item;
        try {
            item.id      = j.at("id").get<std::string>();
            item.task    = TaskSpec::parse(j.at("task").get<std::string>());
            item.caption = j.at("caption").get<std::string>();
            item.seed    = j.at("seed").get<uint64_t>();
            if (j.contains("context_seeds")) {
                item.context_seeds = j["context_seeds"].get<std::vector<uint64_t>>();
            }
            item.query  = load(j.at("query").get<std::string>());
            item.target = load(j.at("target").get<std::string>());
            for (auto& c : j.at("context")) {
                item.context.push_back({load(c.at("src").get<std::string>()), load(c.at("tgt").get<std::string>())});
            }
        } catch (const nlohmann::json::exception& e) {
            throw IoError("malformed manifest line " + where() + ": " + e.what());
        } catch (const std::invalid_argument& e) {
            throw IoError("malformed manifest line " + where() + ": " + e.what());
        }
        return item;
    }

    Image load(const std::string& rel) {
        auto p = dir_ / rel;
        if (!std::filesystem::exists(p)) {
            throw IoError("manifest line " + std::to_string(line_no_) + " references missing file " + p.string());
        }
        return read_png(p);
    }

    std::filesystem::path dir_;
    std::ifstream in_;
    int64_t line_no_ = 0;
};

inline std::vector<DatasetItem> read_corpus(const std::filesystem::path& dir) { return CorpusReader(dir).read_all(); }

}  // namespace icl
