#include "doctest_torch.hpp"

#include "ctreason/engine/engine.hpp"
#include "ctreason/errors.hpp"
#include "ctreason/perceiver.hpp"
#include "ctreason/reasoner.hpp"
#include "gradcheck.hpp"

using namespace ctreason;
using tokenizer::RoutingKind;
using tokenizer::Special;

namespace {

const auto f64 = torch::TensorOptions().dtype(torch::kFloat64);

struct Fixture {
    tokenizer::Vocabulary vocab = engine::default_vocabulary();
    ReasonerConfig cfg;
    Fixture() { cfg.vocab_size = static_cast<int>(vocab.size()); }

    reasoner::Reasoner make(std::uint64_t seed = 0) const {
        torch::manual_seed(seed);
        reasoner::Reasoner r(cfg);
        r->to(torch::kFloat64);
        r->eval();
        return r;
    }
    torch::Tensor features(int batch = 1) const {
        return torch::rand({batch, cfg.image_token_count(), cfg.image_feature_dim()}, f64);
    }
};

}  // namespace

TEST_CASE("reasoner shapes and errors") {
    Fixture fx;
    auto r = fx.make();
    const auto ids = torch::randint(0, fx.cfg.vocab_size, {2, 9}, torch::kInt64);
    const auto out = r->forward(fx.features(2), ids);
    CHECK(out.logits.sizes() == torch::IntArrayRef({2, 9, fx.cfg.vocab_size}));
    CHECK(out.hidden.sizes() == torch::IntArrayRef({2, 9, fx.cfg.hidden_dim}));
    CHECK_THROWS_AS(r->forward(fx.features(2), torch::zeros({2, fx.cfg.max_seq_len + 1}, torch::kInt64)), LengthError);
    CHECK(reasoner::patchify(torch::rand({3, 64, 64}), 16).sizes() == torch::IntArrayRef({3, 16, 256}));
}

TEST_CASE("reasoner is causal over the text positions") {
    Fixture fx;
    auto r = fx.make(3);
    const auto feats = fx.features();
    auto ids = torch::randint(6, fx.cfg.vocab_size, {1, 12}, torch::kInt64);
    const auto base = r->forward(feats, ids).logits;
    for (int t = 0; t < 11; ++t) {
        auto changed = ids.clone();
        changed[0][t + 1] = (changed[0][t + 1].item<std::int64_t>() + 1) % fx.cfg.vocab_size;
        const auto out = r->forward(feats, changed).logits;
        using torch::indexing::Slice;
        CHECK(torch::equal(out.index({0, Slice(0, t + 1)}), base.index({0, Slice(0, t + 1)})));
        CHECK_FALSE(torch::equal(out.index({0, t + 1}), base.index({0, t + 1})));
    }
}

TEST_CASE("greedy decoding") {
    Fixture fx;
    const auto query = fx.vocab.encode("segment the liver");
    const auto feats = fx.features();
    SUBCASE("deterministic for fixed weights") {
        auto a = fx.make(5), b = fx.make(5);
        const auto ga = a->generate(feats, query, 10, fx.vocab), gb = b->generate(feats, query, 10, fx.vocab);
        CHECK(ga.answer == gb.answer);
        CHECK(torch::equal(ga.hidden, gb.hidden));
        CHECK(ga.hidden.size(0) == static_cast<std::int64_t>(ga.answer.size()));
    }
    SUBCASE("max_new = 0 emits nothing") {
        auto r = fx.make();
        const auto g = r->generate(feats, query, 0, fx.vocab);
        CHECK(g.answer.empty());
        CHECK(g.hidden.size(0) == 0);
        CHECK(g.routing.empty());
    }
    SUBCASE("ties resolve to the lowest id") {
        auto r = fx.make();
        {
            torch::NoGradGuard ng;
            r->lm_head->weight.zero_();
            r->lm_head->bias.zero_();
            r->lm_head->bias[fx.vocab.id(Special::closer)] = 1.0;
            r->lm_head->bias[fx.vocab.id(Special::seg)] = 1.0;
        }
        const auto g = r->generate(feats, query, 4, fx.vocab);
        CHECK(g.answer == tokenizer::TokenSequence(4, fx.vocab.id(Special::seg)));
        REQUIRE(g.routing.size() == 4);
        // Two [seg] tokens: the first one's state is the embedding.
        const auto e = reasoner::extract_routing_embedding(g, RoutingKind::seg);
        CHECK(torch::equal(e, g.hidden[0]));
        CHECK_THROWS_AS(reasoner::extract_routing_embedding(g, RoutingKind::det), MissingRoutingTokenError);
    }
    SUBCASE("stops at EOS") {
        auto r = fx.make();
        {
            torch::NoGradGuard ng;
            r->lm_head->weight.zero_();
            r->lm_head->bias.zero_();
            r->lm_head->bias[fx.vocab.id(Special::eos)] = 1.0;
        }
        CHECK(r->generate(feats, query, 8, fx.vocab).answer == tokenizer::TokenSequence{fx.vocab.id(Special::eos)});
    }
}

TEST_CASE("routing embedding extraction picks the first matching row") {
    reasoner::GenerationResult g;
    g.hidden = torch::arange(12, f64).view({4, 3});
    g.routing = {{1, RoutingKind::det}, {2, RoutingKind::seg}, {3, RoutingKind::seg}};
    CHECK(torch::equal(reasoner::extract_routing_embedding(g, RoutingKind::seg), g.hidden[2]));
    CHECK(torch::equal(reasoner::extract_routing_embedding(g, RoutingKind::det), g.hidden[1]));
    CHECK_THROWS_AS(reasoner::extract_routing_embedding(g, RoutingKind::closer), MissingRoutingTokenError);
}

TEST_CASE("low-rank adapters") {
    AdapterConfig ac;
    ac.rank = 4;
    SUBCASE("parameter count and identity at initialisation") {
        torch::manual_seed(1);
        reasoner::LowRankLinear lin(128, 128);
        lin->to(torch::kFloat64);
        const auto x = torch::randn({5, 128}, f64);
        const auto before = lin->forward(x);
        lin->attach(ac);
        CHECK(lin->lora_a().numel() + lin->lora_b().numel() == 1024);
        CHECK(lin->lora_b().abs().max().item<double>() == 0.0);
        lin->train();
        CHECK((lin->forward(x) - before).abs().max().item<double>() <= 1e-6);
        CHECK_THROWS_AS(lin->attach(ac), ConfigError);
        AdapterConfig huge;
        huge.rank = 200;
        reasoner::LowRankLinear other(128, 64);
        CHECK_THROWS_AS(other->attach(huge), ConfigError);
    }
    SUBCASE("reasoner counts only adapter parameters as trainable") {
        Fixture fx;
        for (int r : {2, 4, 8, 16}) {
            auto m = fx.make();
            const auto feats = fx.features();
            const auto ids = torch::randint(0, fx.cfg.vocab_size, {1, 7}, torch::kInt64);
            const auto before = m->forward(feats, ids).logits;
            AdapterConfig c;
            c.rank = r;
            m->attach_adapters(c);
            CHECK(m->trainable_parameter_count() == m->expected_adapter_parameters(r));
            // 2 layers x 4 projections x r x (128 + 128)
            CHECK(m->expected_adapter_parameters(r) == 8LL * r * 256);
            CHECK((m->forward(feats, ids).logits - before).abs().max().item<double>() <= 1e-6);
        }
    }
    SUBCASE("adapted output moves once B is nonzero") {
        torch::manual_seed(2);
        reasoner::LowRankLinear lin(16, 8);
        lin->to(torch::kFloat64);
        lin->attach(ac);
        lin->eval();
        const auto x = torch::randn({3, 16}, f64);
        const auto base = lin->base->forward(x);
        {
            torch::NoGradGuard ng;
            const_cast<torch::Tensor&>(lin->lora_b()).fill_(0.5);
        }
        const auto delta = (16.0 / 4) * x.matmul(lin->lora_a().t()).matmul(lin->lora_b().t());
        CHECK(torch::allclose(lin->forward(x), base + delta, 1e-12, 1e-12));
    }
}

namespace {

perceiver::Perceiver make_perceiver(std::uint64_t seed, PerceiverConfig cfg = {}) {
    torch::manual_seed(seed);
    perceiver::Perceiver p(cfg, 128);
    p->to(torch::kFloat64);
    p->eval();
    return p;
}

}  // namespace

TEST_CASE("perceiver encoder and heads") {
    auto p = make_perceiver(4);
    const auto img = torch::rand({2, 64, 64}, f64);
    const auto fm = p->encode_image(img);
    CHECK(fm.z.sizes() == torch::IntArrayRef({2, 32, 8, 8}));
    CHECK_THROWS_AS(p->encode_image(torch::rand({2, 32, 32}, f64)), ShapeError);

    const auto e = torch::randn({2, 32}, f64);
    const auto logits = p->segment(fm, e);
    CHECK(logits.sizes() == torch::IntArrayRef({2, 64, 64}));
    const auto prob = torch::sigmoid(logits);
    CHECK(prob.min().item<double>() >= 0.0);
    CHECK(prob.max().item<double>() <= 1.0);
    CHECK_THROWS_AS(p->segment(fm, torch::randn({2, 31}, f64)), ShapeError);
    CHECK_THROWS_AS(p->segment(fm, torch::randn({1, 32}, f64)), ShapeError);

    const auto det = p->detect(fm, e);
    CHECK(det.boxes.sizes() == torch::IntArrayRef({2, 8, 4}));
    CHECK(det.scores.sizes() == torch::IntArrayRef({2, 8}));
    using torch::indexing::Slice;
    const auto b = det.boxes;
    CHECK(b.min().item<double>() >= 0.0);
    CHECK(b.max().item<double>() <= 1.0);
    CHECK((b.index({Slice(), Slice(), 0}) <= b.index({Slice(), Slice(), 2})).all().item<bool>());
    CHECK((b.index({Slice(), Slice(), 1}) <= b.index({Slice(), Slice(), 3})).all().item<bool>());
    CHECK(torch::allclose(det.scores, torch::sigmoid(det.score_logits)));

    // Deterministic for a seed, and the prompt changes both heads.
    auto q = make_perceiver(4);
    CHECK(torch::equal(q->segment(q->encode_image(img), e), logits));
    CHECK(torch::equal(q->detect(q->encode_image(img), e).boxes, det.boxes));
    const auto e0 = torch::zeros({2, 32}, f64), e1 = torch::ones({2, 32}, f64);
    CHECK_FALSE(torch::allclose(p->segment(fm, e0), p->segment(fm, e1)));
    CHECK_FALSE(torch::allclose(p->detect(fm, e0).score_logits, p->detect(fm, e1).score_logits));
}

TEST_CASE("squashed boxes stay inside the unit square") {
    const auto raw = torch::randn({1000, 4}, f64) * 6;
    const auto b = perceiver::squash_boxes(raw);
    using torch::indexing::Slice;
    CHECK(b.min().item<double>() >= 0.0);
    CHECK(b.max().item<double>() <= 1.0);
    CHECK((b.index({Slice(), 0}) <= b.index({Slice(), 2})).all().item<bool>());
    CHECK((b.index({Slice(), 1}) <= b.index({Slice(), 3})).all().item<bool>());
}

TEST_CASE("projector") {
    auto p = make_perceiver(6);
    auto& proj = p->projector;
    const auto zero = torch::zeros({1, 128}, f64);
    const auto want = proj->fc2->forward(torch::gelu(proj->fc1->bias.unsqueeze(0)));
    CHECK(torch::allclose(proj->forward(zero), want, 1e-12, 1e-12));
    CHECK_THROWS_AS(proj->forward(torch::zeros({1, 64}, f64)), ShapeError);
    torch::manual_seed(0);
    for (int k = 0; k < 4; ++k) {
        const auto h = torch::randn({128}, f64);
        const auto probe = torch::randn({32}, f64);
        CHECK(testsupport::gradient_rel_error(
                  [&](const torch::Tensor& x) { return (proj->forward(x) * probe).sum(); }, h) < 1e-6);
    }
}
