#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <unistd.h>

#include "helpers.hpp"

using namespace icl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("icldiff_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Row-by-row coverage of one shape evaluated at pixel centres, written from the geometric definitions.
std::vector<std::pair<int, int>> scanline_pixels(const ShapeSpec& s, int W, int H) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < H; y++) {
        const double yc = y + 0.5;
        double lo = 1, hi = 0;
        switch (s.cls) {
            case ShapeClass::square:
                if (y >= s.y0 && y < s.y0 + s.size) {
                    lo = s.x0 + 0.5;
                    hi = s.x0 + s.size - 0.5;
                }
                break;
            case ShapeClass::circle: {
                const double r = s.size / 2.0, dy = yc - (s.y0 + r);
                if (dy * dy <= r * r) {
                    const double half = std::sqrt(r * r - dy * dy);
                    lo = s.x0 + r - half;
                    hi = s.x0 + r + half;
                }
                break;
            }
            case ShapeClass::triangle:
                if (yc >= s.y0 && yc <= s.y0 + s.size) {
                    const double half = (yc - s.y0) / 2.0;  // apex at top centre, base = size
                    lo = s.x0 + s.size / 2.0 - half;
                    hi = s.x0 + s.size / 2.0 + half;
                }
                break;
        }
        for (int x = 0; x < W; x++) {
            const double xc = x + 0.5;
            if (xc >= lo - 1e-12 && xc <= hi + 1e-12) {
                out.emplace_back(x, y);
            }
        }
    }
    return out;
}

bool same_color(const Image& img, int x, int y, const NamedColor& c) {
    return pixel(img, 0, y, x) == c.r && pixel(img, 1, y, x) == c.g && pixel(img, 2, y, x) == c.b;
}

Image random_map(Rng& rng, int size) {
    Image m = make_image(size, size);
    for (auto& v : m.data) {
        v = static_cast<float>(rng.uniform());
    }
    return m;
}

}  // namespace

TEST(Corpus, RenderIsDeterministic) {
    CorpusConfig cfg;
    auto [s1, a] = render_scene(1234, cfg);
    auto [s2, b] = render_scene(1234, cfg);
    EXPECT_TRUE(icl::testing::bitwise_equal(a, b));
    EXPECT_EQ(s1.caption(), s2.caption());
}

TEST(Corpus, Seed7PixelCountsMatchScanlineOracle) {
    CorpusConfig cfg;
    auto [scene, img] = render_scene(7, cfg);
    ASSERT_GE(scene.shapes.size(), 1u);
    ASSERT_LE(scene.shapes.size(), 4u);
    // Painter's algorithm over the oracle coverage.
    std::vector<int> owner(static_cast<size_t>(cfg.image_size * cfg.image_size), -1);
    std::vector<int> order(scene.shapes.size());
    for (size_t i = 0; i < order.size(); i++) {
        order[static_cast<size_t>(scene.shapes[i].z)] = static_cast<int>(i);
    }
    for (int s : order) {
        for (auto [x, y] : scanline_pixels(scene.shapes[static_cast<size_t>(s)], cfg.image_size, cfg.image_size)) {
            owner[static_cast<size_t>(y * cfg.image_size + x)] = s;
        }
    }
    std::map<int, int> expected, actual;
    for (int v : owner) {
        expected[v]++;
    }
    for (int y = 0; y < cfg.image_size; y++) {
        for (int x = 0; x < cfg.image_size; x++) {
            int found = -2;
            if (same_color(img, x, y, palette()[static_cast<size_t>(scene.background)])) {
                found = -1;
            }
            for (size_t i = 0; i < scene.shapes.size(); i++) {
                if (same_color(img, x, y, palette()[static_cast<size_t>(scene.shapes[i].color)])) {
                    found = static_cast<int>(i);
                }
            }
            actual[found]++;
        }
    }
    EXPECT_EQ(actual.count(-2), 0u);
    EXPECT_EQ(expected, actual);
}

TEST(Corpus, ShapesStayInsideCanvasAndCountInRange) {
    CorpusConfig cfg;
    for (uint64_t seed = 0; seed < 200; seed++) {
        auto [scene, img] = render_scene(seed, cfg);
        ASSERT_GE(scene.shapes.size(), 1u);
        ASSERT_LE(scene.shapes.size(), 4u);
        for (auto& s : scene.shapes) {
            EXPECT_GE(s.x0, 0);
            EXPECT_GE(s.y0, 0);
            EXPECT_LE(s.x0 + s.size, cfg.image_size);
            EXPECT_LE(s.y0 + s.size, cfg.image_size);
        }
    }
}

TEST(Corpus, ZeroShapeRangeRejectedAtValidation) {
    CorpusConfig cfg;
    cfg.min_shapes = 0;
    cfg.max_shapes = 0;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Corpus, EdgeOfSingleSquareMatchesNeighbourOracle) {
    CorpusConfig cfg;
    cfg.image_size = 16;
    Scene scene;
    scene.width = scene.height = 16;
    scene.background           = 0;
    scene.shapes.push_back({ShapeClass::square, 3, 5, 6, 2, 0});
    Image img = make_image(16, 16, 0.5f);
    Image e   = annotate(img, scene, Annotator::edge, cfg);
    auto inside = [](int x, int y) { return x >= 3 && x < 9 && y >= 5 && y < 11; };
    int marked = 0;
    for (int y = 0; y < 16; y++) {
        for (int x = 0; x < 16; x++) {
            bool want = false;
            const int dx[] = {1, -1, 0, 0}, dy[] = {0, 0, 1, -1};
            for (int k = 0; k < 4; k++) {
                int nx = x + dx[k], ny = y + dy[k];
                if (nx >= 0 && nx < 16 && ny >= 0 && ny < 16 && inside(nx, ny) != inside(x, y)) {
                    want = true;
                }
            }
            marked += want;
            for (int c = 0; c < 3; c++) {
                ASSERT_EQ(pixel(e, c, y, x), want ? 1.0f : 0.0f) << x << "," << y;
            }
        }
    }
    EXPECT_EQ(marked, 20 + 24);  // inner perimeter of a 6x6 square plus the 4-connected outer ring
}

TEST(Corpus, ConstantImageHasNoEdges) {
    CorpusConfig cfg;
    cfg.image_size = 16;
    Scene empty;
    empty.width = empty.height = 16;
    Image flat = make_image(16, 16, 0.3f);
    for (const Image& e : {annotate(flat, empty, Annotator::edge, cfg), annotate(flat, nullptr, Annotator::edge, cfg)}) {
        for (float v : e.data) {
            ASSERT_EQ(v, 0.0f);
        }
    }
}

TEST(Corpus, InvertIsAnInvolution) {
    CorpusConfig cfg;
    auto [scene, img] = render_scene(99, cfg);
    Image twice = annotate(annotate(img, scene, Annotator::invert, cfg), scene, Annotator::invert, cfg);
    EXPECT_TRUE(icl::testing::bitwise_equal(twice, img));
}

TEST(Corpus, SegAndDepthFollowScene) {
    CorpusConfig cfg;
    auto [scene, img] = render_scene(42, cfg);
    Image seg   = annotate(img, scene, Annotator::seg, cfg);
    Image depth = annotate(img, scene, Annotator::depth, cfg);
    auto ids    = scene.id_map();
    const float n = static_cast<float>(scene.shapes.size());
    for (int y = 0; y < cfg.image_size; y++) {
        for (int x = 0; x < cfg.image_size; x++) {
            int id = ids[static_cast<size_t>(y * cfg.image_size + x)];
            for (int c = 0; c < 3; c++) {
                float want = id >= 0 && static_cast<int>(scene.shapes[static_cast<size_t>(id)].cls) == c ? 1.0f : 0.0f;
                ASSERT_EQ(pixel(seg, c, y, x), want);
                float d = id < 0 ? 0.0f : static_cast<float>(scene.shapes[static_cast<size_t>(id)].z + 1) / (n + 1.0f);
                ASSERT_EQ(pixel(depth, c, y, x), d);
            }
        }
    }
}

TEST(Corpus, BlurMatchesDirectKernelSum) {
    CorpusConfig cfg;
    cfg.image_size = 16;
    auto [scene, img] = render_scene(5, cfg);
    Image b = annotate(img, scene, Annotator::blur, cfg);
    const int r = cfg.blur_radius;
    const double sg = cfg.blur_sigma;
    auto refl = [](int i, int n) { return i < 0 ? -i : (i >= n ? 2 * (n - 1) - i : i); };
    double norm = 0;
    for (int i = -r; i <= r; i++) {
        norm += std::exp(-i * i / (2 * sg * sg));
    }
    for (int c = 0; c < 3; c++) {
        for (int y = 0; y < 16; y++) {
            for (int x = 0; x < 16; x++) {
                double s = 0;
                for (int i = -r; i <= r; i++) {
                    for (int j = -r; j <= r; j++) {
                        const double w = std::exp(-(i * i + j * j) / (2 * sg * sg)) / (norm * norm);
                        s += w * pixel(img, c, refl(y + i, 16), refl(x + j, 16));
                    }
                }
                ASSERT_NEAR(pixel(b, c, y, x), s, 1e-6);
            }
        }
    }
}

TEST(Corpus, AnnotatorsArePureAndInUnitRange) {
    CorpusConfig cfg;
    for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        auto [scene, img] = render_scene(seed, cfg);
        for (auto a : all_annotators()) {
            Image m1 = annotate(img, scene, a, cfg);
            Image m2 = annotate(img, scene, a, cfg);
            EXPECT_TRUE(icl::testing::bitwise_equal(m1, m2));
            for (float v : m1.data) {
                ASSERT_GE(v, 0.0f);
                ASSERT_LE(v, 1.0f);
            }
        }
    }
    EXPECT_THROW(annotate(make_image(8, 8), nullptr, static_cast<Annotator>(17), cfg), std::invalid_argument);
    EXPECT_THROW(annotate(make_image(8, 8), nullptr, Annotator::seg, cfg), std::invalid_argument);
}

TEST(Corpus, DilateIsBoxDilationOfEdges) {
    CorpusConfig cfg;
    cfg.image_size = 16;
    auto [scene, img] = render_scene(8, cfg);
    Image e = annotate(img, scene, Annotator::edge, cfg);
    Image d = annotate(img, scene, Annotator::dilate, cfg);
    // Two 3x3 box iterations = 5x5 window, clipped at the border.
    for (int y = 0; y < 16; y++) {
        for (int x = 0; x < 16; x++) {
            float want = 0;
            for (int yy = std::max(0, y - 2); yy <= std::min(15, y + 2); yy++) {
                for (int xx = std::max(0, x - 2); xx <= std::min(15, x + 2); xx++) {
                    want = std::max(want, pixel(e, 0, yy, xx));
                }
            }
            ASSERT_EQ(pixel(d, 0, y, x), want);
        }
    }
}

TEST(Corpus, SplitPartitionIsTotalAndDisjoint) {
    std::set<std::string> train, held;
    for (auto& t : tasks_of(Split::train)) {
        train.insert(annotator_name(t.annotator));
    }
    for (auto& t : tasks_of(Split::heldout)) {
        held.insert(annotator_name(t.annotator));
    }
    EXPECT_EQ(train, (std::set<std::string>{"edge", "seg", "depth", "blur"}));
    EXPECT_EQ(held, (std::set<std::string>{"invert", "dilate"}));
    EXPECT_EQ(all_tasks().size(), 12u);
    std::set<std::string> names;
    for (auto& t : all_tasks()) {
        names.insert(t.name());
        EXPECT_EQ(TaskSpec::parse(t.name()), t);
    }
    EXPECT_EQ(names.size(), 12u);
}

TEST(Corpus, MakeItemConstruction) {
    CorpusConfig cfg;
    Rng rng(5);
    auto item = make_item(rng, TaskSpec::parse("img2edge"), 1, cfg);
    auto [scene, img] = render_scene(item.seed, cfg);
    EXPECT_TRUE(icl::testing::bitwise_equal(item.query, img));
    EXPECT_TRUE(icl::testing::bitwise_equal(item.target, annotate(img, scene, Annotator::edge, cfg)));
    EXPECT_EQ(item.caption, "edge map");

    Rng r3(6);
    auto item3 = make_item(r3, TaskSpec::parse("depth2img"), 3, cfg);
    ASSERT_EQ(item3.context.size(), 3u);
    for (size_t i = 0; i < 3; i++) {
        auto [s, im] = render_scene(item3.context_seeds[i], cfg);
        EXPECT_TRUE(icl::testing::bitwise_equal(item3.context[i].source, annotate(im, s, Annotator::depth, cfg)));
        EXPECT_TRUE(icl::testing::bitwise_equal(item3.context[i].target, im));
        EXPECT_NE(item3.context_seeds[i], item3.seed);
    }
    EXPECT_EQ(item3.caption, render_scene(item3.seed, cfg).first.caption());

    Rng a(77), b(77);
    auto i1 = make_item(a, TaskSpec::parse("img2blur"), 2, cfg);
    auto i2 = make_item(b, TaskSpec::parse("img2blur"), 2, cfg);
    EXPECT_TRUE(icl::testing::bitwise_equal(i1.target, i2.target));
    EXPECT_EQ(i1.context_seeds, i2.context_seeds);
}

TEST(Corpus, ContextAndQuerySeedsDisjointAndSpacesSeparated) {
    CorpusConfig train_cfg, test_cfg;
    test_cfg.seed_space = SeedSpace::test;
    Rng rng(1);
    for (int i = 0; i < 200; i++) {
        auto it = make_item(rng, TaskSpec::parse("img2seg"), 3, i % 2 ? train_cfg : test_cfg);
        std::set<uint64_t> all(it.context_seeds.begin(), it.context_seeds.end());
        all.insert(it.seed);
        EXPECT_EQ(all.size(), 4u);
        for (auto s : all) {
            EXPECT_EQ(seed_space_of(s), i % 2 ? SeedSpace::train : SeedSpace::test);
        }
    }
}

TEST(Corpus, MixMapsOracles) {
    Rng rng(3);
    Image a = random_map(rng, 8), b = random_map(rng, 8), c = random_map(rng, 8);
    EXPECT_TRUE(icl::testing::bitwise_equal(mix_maps({a, b}, {1.0, 0.0}), a));
    Image m = mix_maps({make_image(8, 8, 0.0f), make_image(8, 8, 1.0f)}, {0.5, 0.5});
    for (float v : m.data) {
        ASSERT_EQ(v, 0.5f);
    }
    Image mix = mix_maps({a, b, c}, {0.2, 0.3, 0.5});
    for (int64_t i = 0; i < mix.size(); i++) {
        double want = 0.2 * a[i] + 0.3 * b[i] + 0.5 * c[i];
        ASSERT_NEAR(mix[i], std::clamp(want, 0.0, 1.0), 1e-6);
    }
    Image perm = mix_maps({c, a, b}, {0.5, 0.2, 0.3});
    for (int64_t i = 0; i < mix.size(); i++) {
        ASSERT_NEAR(perm[i], mix[i], 1e-6);
    }
    EXPECT_THROW(mix_maps({a, b}, {0.5, 0.6}), std::invalid_argument);
    EXPECT_THROW(mix_maps({a, make_image(4, 4)}, {0.5, 0.5}), ShapeError);
}

TEST(Corpus, EmptyCorpusHasEmptyManifest) {
    auto dir = temp_dir("empty");
    CorpusConfig cfg;
    cfg.count = 0;
    write_corpus(cfg, dir, 1);
    std::ifstream in(dir / "manifest.jsonl");
    std::string line;
    EXPECT_FALSE(static_cast<bool>(std::getline(in, line)));
    EXPECT_TRUE(read_corpus(dir).empty());
    fs::remove_all(dir);
}

TEST(Corpus, WriteReadRoundtrip) {
    auto dir = temp_dir("roundtrip");
    CorpusConfig cfg;
    cfg.image_size = 16;
    cfg.count      = 5;
    cfg.k          = 2;
    cfg.tasks      = {"img2edge", "blur2img"};
    auto m         = write_corpus(cfg, dir, 9);
    ASSERT_EQ(m.records.size(), 10u);
    auto items = read_corpus(dir);
    ASSERT_EQ(items.size(), 10u);
    for (size_t j = 0; j < items.size(); j++) {
        const TaskSpec task = TaskSpec::parse(j < 5 ? "img2edge" : "blur2img");
        Rng rng(derive_seed(9, task.name(), j % 5));
        auto orig = make_item(rng, task, 2, cfg);
        EXPECT_EQ(items[j].task, task);
        EXPECT_EQ(items[j].caption, orig.caption);
        EXPECT_EQ(items[j].seed, orig.seed);
        ASSERT_EQ(items[j].context.size(), 2u);
        auto close = [](const Image& x, const Image& y) {
            for (int64_t i = 0; i < x.size(); i++) {
                if (std::abs(x[i] - y[i]) > 1.0f / 255.0f) return false;
            }
            return true;
        };
        EXPECT_TRUE(close(items[j].query, orig.query));
        EXPECT_TRUE(close(items[j].target, orig.target));
        EXPECT_TRUE(close(items[j].context[1].target, orig.context[1].target));
    }
    fs::remove_all(dir);
}

TEST(Corpus, ReadErrorsNameThePathOrLine) {
    auto dir = temp_dir("errors");
    CorpusConfig cfg;
    cfg.image_size = 8;
    cfg.count      = 1;
    cfg.tasks      = {"img2edge"};
    write_corpus(cfg, dir, 2);
    const fs::path victim = dir / "img2edge" / "train" / "img2edge_000000_target.png";
    ASSERT_TRUE(fs::exists(victim));
    fs::remove(victim);
    try {
        read_corpus(dir);
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find(victim.string()), std::string::npos) << e.what();
    }
    {
        std::ofstream out(dir / "manifest.jsonl", std::ios::app);
        out << "{not json\n";
    }
    CorpusReader r(dir);
    EXPECT_THROW(r.next(), IoError);
    {
        std::ofstream out(dir / "manifest.jsonl");
        out << "\n{\"id\": 3\n";
    }
    try {
        read_corpus(dir);
        FAIL() << "expected IoError";
    } catch (const IoError& e) {
        EXPECT_NE(std::string(e.what()).find("manifest.jsonl:2"), std::string::npos) << e.what();
    }
    fs::remove_all(dir);
}

TEST(Corpus, SameSeedSameManifest) {
    auto d1 = temp_dir("m1"), d2 = temp_dir("m2");
    CorpusConfig cfg;
    cfg.image_size = 8;
    cfg.count      = 2;
    write_corpus(cfg, d1, 4);
    write_corpus(cfg, d2, 4);
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    EXPECT_EQ(slurp(d1 / "manifest.jsonl"), slurp(d2 / "manifest.jsonl"));
    EXPECT_EQ(slurp(d1 / "img2seg/train/img2seg_000001_query.png"), slurp(d2 / "img2seg/train/img2seg_000001_query.png"));
    fs::remove_all(d1);
    fs::remove_all(d2);
}
