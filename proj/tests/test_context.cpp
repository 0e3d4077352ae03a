#include <gtest/gtest.h>

#include "helpers.hpp"

using namespace icl;

namespace {

ContextEncoder<float> make_encoder(bool zero_output = false) {
    ContextConfig cfg;
    cfg.patch       = 4;
    cfg.width       = 32;
    cfg.depth       = 2;
    cfg.heads       = 4;
    cfg.zero_output = zero_output;
    Rng rng(21);
    return ContextEncoder<float>(16, 24, cfg, rng);
}

std::vector<ImagePair> random_pairs(int k, uint64_t seed) {
    CorpusConfig cfg;
    cfg.image_size = 16;
    Rng rng(seed);
    std::vector<ImagePair> out;
    const auto tasks = tasks_of(Split::train);
    for (int i = 0; i < k; i++) {
        out.push_back(realize_task(draw_scene_seed(rng, SeedSpace::train), tasks[static_cast<size_t>(i) % tasks.size()], cfg).first);
    }
    return out;
}

}  // namespace

TEST(Context, PairOrderMatters) {
    auto enc = make_encoder();
    auto p   = random_pairs(1, 1)[0];
    auto ab  = enc.encode_pair(p.source, p.target).value();
    auto ba  = enc.encode_pair(p.target, p.source).value();
    double diff = 0;
    for (int64_t i = 0; i < ab.size(); i++) {
        diff = std::max(diff, static_cast<double>(std::abs(ab[i] - ba[i])));
    }
    EXPECT_GT(diff, 1e-6);
    EXPECT_EQ(ab.shape, (Shape{24}));
}

TEST(Context, Deterministic) {
    auto enc = make_encoder();
    auto p   = random_pairs(1, 2)[0];
    EXPECT_TRUE(icl::testing::bitwise_equal(enc.encode_pair(p.source, p.target).value(),
                                            enc.encode_pair(p.source, p.target).value()));
}

TEST(Context, ZeroProjectionGivesZeroVector) {
    auto enc = make_encoder(true);
    for (auto& p : random_pairs(3, 3)) {
        auto e = enc.encode_pair(p.source, p.target);
        for (float v : e.value().data) {
            ASSERT_EQ(v, 0.0f);
        }
    }
}

TEST(Context, SinglePairEqualsEncodePair) {
    auto enc   = make_encoder();
    auto pairs = random_pairs(1, 4);
    EXPECT_TRUE(icl::testing::bitwise_equal(enc.encode_context(pairs).value(),
                                            enc.encode_pair(pairs[0].source, pairs[0].target).value()));
}

TEST(Context, IdenticalPairsEqualSinglePair) {
    auto enc  = make_encoder();
    auto one  = random_pairs(1, 5);
    std::vector<ImagePair> three = {one[0], one[0], one[0]};
    EXPECT_TRUE(icl::testing::bitwise_equal(enc.encode_context(three).value(), enc.encode_context(one).value()));
}

TEST(Context, PermutationInvariantAndDuplicationIdempotent) {
    auto enc   = make_encoder();
    auto pairs = random_pairs(4, 6);
    auto base  = enc.encode_context(pairs).value();
    std::vector<ImagePair> perm = {pairs[2], pairs[0], pairs[3], pairs[1]};
    EXPECT_TRUE(icl::testing::bitwise_equal(enc.encode_context(perm).value(), base));
    std::vector<ImagePair> twice = pairs;
    twice.insert(twice.end(), pairs.begin(), pairs.end());
    auto dup = enc.encode_context(twice).value();
    for (int64_t i = 0; i < base.size(); i++) {
        EXPECT_NEAR(dup[i], base[i], 1e-6);
    }
}

TEST(Context, BatchedSetsMatchIndividualSets) {
    auto enc = make_encoder();
    auto a   = random_pairs(2, 7), b = random_pairs(3, 8);
    auto both = enc.encode_context(std::vector<const std::vector<ImagePair>*>{&a, &b}).value();
    auto ea = enc.encode_context(a).value(), eb = enc.encode_context(b).value();
    for (int j = 0; j < 24; j++) {
        EXPECT_NEAR(both[j], ea[j], 1e-6);
        EXPECT_NEAR(both[24 + j], eb[j], 1e-6);
    }
}

TEST(Context, Errors) {
    auto enc = make_encoder();
    EXPECT_THROW(enc.encode_context(std::vector<ImagePair>{}), std::invalid_argument);
    EXPECT_THROW(enc.encode_pair(make_image(16, 16), make_image(8, 8)), ShapeError);
}

TEST(Context, OutputWidthEqualsTextWidth) {
    auto mc = icl::testing::micro_model_config();
    IclModel<double> m(mc, Vocabulary::standard(), 1);
    m.attach_control(2);
    CorpusConfig cc = icl::testing::corpus_of_size(mc.image_size);
    cc.min_shape_size = 2;
    cc.max_shape_size = 4;
    Rng rng(3);
    auto item = make_item(rng, TaskSpec::parse("img2seg"), 2, cc);
    EXPECT_EQ(m.context->encode_context(item.context).shape(), (Shape{mc.d}));
    EXPECT_EQ(m.text->width(), mc.d);
}

namespace {

// Gradient of the stage-B loss w.r.t. phi for a two-item batch with the given context-dropped flags.
double phi_grad_norm(bool drop_context) {
    auto mc = icl::testing::micro_model_config();
    IclModel<double> m(mc, Vocabulary::standard(), 4);
    m.attach_control(5);
    Rng zr(6);
    icl::testing::randomize_zero_convs(*m.control, zr);
    CorpusConfig cc = icl::testing::corpus_of_size(mc.image_size);
    cc.min_shape_size = 2;
    cc.max_shape_size = 4;
    Rng rng(7);
    std::vector<CondRequest> reqs;
    std::vector<DatasetItem> items;
    for (int b = 0; b < 2; b++) {
        items.push_back(make_item(rng, TaskSpec::parse(b ? "img2depth" : "edge2img"), 1, cc));
        CondRequest r;
        r.prompt          = items.back().caption;
        r.context         = items.back().context;
        r.context_dropped = drop_context;
        r.hint            = items.back().query;
        reqs.push_back(r);
    }
    std::vector<const Image*> tg = {&items[0].target, &items[1].target};
    auto x0   = stack_model_space<double>(tg);
    auto eps  = icl::testing::random_tensor(x0.shape, rng);
    auto s    = make_schedule(1000);
    auto cond = m.condition(reqs);
    training_loss(s, x0, {100, 700}, eps, [&](const Tensor<double>& z, const std::vector<int>& t) {
        return m.predict(constant(z), t, cond);
    }).backward();
    double n = 0;
    for (auto& [name, p] : m.context->named_parameters()) {
        if (p.has_grad()) {
            for (double g : p.grad().data) {
                n += g * g;
            }
        }
    }
    return std::sqrt(n);
}

}  // namespace

TEST(Context, GradientReachesPhiOnlyWhenContextUsed) {
    EXPECT_GT(phi_grad_norm(false), 0.0);
    EXPECT_EQ(phi_grad_norm(true), 0.0);
}
