#include "doctest_torch.hpp"

#include <fstream>
#include <map>

#include "ctreason/engine/engine.hpp"
#include "ctreason/errors.hpp"
#include "ctreason/synth.hpp"
#include "support.hpp"

using namespace ctreason;
using namespace ctreason::engine;
using tokenizer::RoutingKind;
using tokenizer::Special;

namespace {

RunConfig small_config(const std::string& dtype = "float32") {
    RunConfig cfg;
    cfg.seed = 1;
    cfg.synth.subjects = 3;
    cfg.synth.slices = 4;
    cfg.synth.seed = 1;
    cfg.train.dtype = dtype;
    cfg.train.batch_size = 4;
    cfg.optim.lr = 3e-3;
    return cfg;
}

std::vector<data::MultimodalSample> samples_with_objects(const RunConfig& cfg) {
    const auto ds = synth::generate(synth::apply_profile(cfg.synth));
    std::vector<data::MultimodalSample> out;
    for (const auto& s : ds.samples("train"))
        if (!s.objects.empty()) out.push_back(s);
    return out;
}

std::vector<ObjectRef> refs_where(const std::vector<data::MultimodalSample>& ss, bool (*pred)(data::Task),
                                  std::size_t limit) {
    std::vector<ObjectRef> out;
    for (std::size_t i = 0; i < ss.size(); ++i)
        for (std::size_t j = 0; j < ss[i].objects.size(); ++j)
            if (pred(ss[i].objects[j].task) && out.size() < limit) out.push_back({i, j});
    return out;
}

/// Rewires the reasoner so the next token depends only on the last input token:
/// attention and MLP residuals are zeroed, each listed source token gets a
/// one-hot embedding, and the head maps it to its successor.
void install_successor_table(Models& m, const std::map<std::string, std::string>& next) {
    torch::NoGradGuard ng;
    auto& r = *m.reasoner;
    for (const auto& blk : *r.blocks) {
        auto b = blk->as<reasoner::Block>();
        b->attn->o->base->weight.zero_();
        b->attn->o->base->bias.zero_();
        b->fc2->weight.zero_();
        b->fc2->bias.zero_();
    }
    r.pos_emb.zero_();
    r.tok_emb->weight.zero_();
    r.lm_head->weight.zero_();
    r.lm_head->bias.zero_();
    int slot = 0;
    for (const auto& [from, to] : next) {
        const auto src = m.vocab->encode(from).at(0), dst = m.vocab->encode(to).at(0);
        r.tok_emb->weight[src][slot] = 10.0;
        r.lm_head->weight[dst][slot] = 100.0;
        ++slot;
    }
}

const std::map<std::string, std::string> kRoutes = {
    {"slice", "[seg]"}, {"[seg]", "[eos]"},   {"box", "[det]"},    {"[det]", "[eos]"},
    {"liver", "[closer]"}, {"it", "[closer]"}, {"[closer]", "[eos]"},
};

}  // namespace

TEST_CASE("training batches") {
    const auto cfg = small_config();
    const auto samples = samples_with_objects(cfg);
    const auto vocab = default_vocabulary();
    std::vector<ObjectRef> refs = refs_where(samples, [](data::Task) { return true; }, 6);
    REQUIRE(refs.size() == 6);
    const auto batch = build_batch(samples, refs, vocab, cfg, 7);
    CHECK(batch.num_objects == 6);
    int round2 = 0;
    for (const auto& row : batch.rows) {
        CHECK(row.input.size() == row.target.size());
        CHECK(row.input.front() == vocab.id(Special::bos));
        CHECK(row.target.back() == vocab.id(Special::eos));
        for (std::size_t t = 0; t + 1 < row.input.size(); ++t) CHECK(row.input[t + 1] == row.target[t]);
        for (const auto& rp : row.routing) CHECK(row.target.at(rp.position) == vocab.id(rp.kind));
        CHECK((row.mask.height == row.image.height && row.mask.width == row.image.width));
        if (row.round == 2) {
            ++round2;
            CHECK(row.roi_source == RoiSource::gt_mask);
            CHECK(row.boxes.empty());
            REQUIRE(row.routing.size() == 1);
            CHECK(row.routing[0].kind == RoutingKind::closer);
        } else {
            CHECK(row.roi_source == RoiSource::full_image);
        }
    }
    CHECK(round2 == 6);
    auto no_r2 = cfg;
    no_r2.train.round2 = false;
    CHECK(build_batch(samples, refs, vocab, no_r2, 7).rows.size() == 6);
    // Same seed, same paraphrases.
    const auto again = build_batch(samples, refs, vocab, cfg, 7);
    for (std::size_t i = 0; i < batch.rows.size(); ++i) CHECK(again.rows[i].input == batch.rows[i].input);
    CHECK_THROWS_AS(build_batch(samples, {{999, 0}}, vocab, cfg, 0), RangeError);
}

TEST_CASE("loss parts and detection gating") {
    auto cfg = small_config("float64");
    cfg.loss.lambda_seg = 0.7;
    cfg.loss.lambda_det = 1.3;
    const auto samples = samples_with_objects(cfg);
    const auto vocab = default_vocabulary();
    const auto refs = refs_where(samples, data::wants_det, 3);
    REQUIRE(refs.size() == 3);
    const auto batch = build_batch(samples, refs, vocab, cfg, 1);

    auto det_grad_norm = [](Models& m) {
        double s = 0;
        for (const auto& p : m.perceiver->det_head->parameters())
            if (p.grad().defined()) s += p.grad().abs().sum().item<double>();
        return s;
    };

    auto m = build_models(cfg, vocab);
    m.train(true);
    auto parts = forward_backward(m, batch, cfg, 1.0);
    CHECK(parts.total == doctest::Approx(parts.language + 0.7 * parts.seg + 1.3 * parts.det).epsilon(1e-12));
    CHECK(parts.det > 0);
    CHECK(det_grad_norm(m) > 0);

    cfg.loss.lambda_det = 0;
    auto z = build_models(cfg, vocab);
    z.train(true);
    parts = forward_backward(z, batch, cfg, 1.0);
    CHECK(parts.total == doctest::Approx(parts.language + 0.7 * parts.seg).epsilon(1e-12));
    CHECK(det_grad_norm(z) == 0.0);
    CHECK_THROWS_AS(forward_backward(z, TrainBatch{}, cfg, 1.0), ShapeError);
}

TEST_CASE("float64 training is bit-reproducible") {
    const auto cfg = small_config("float64");
    const auto samples = samples_with_objects(cfg);
    const auto vocab = default_vocabulary();
    auto run = [&] {
        auto m = build_models(cfg, vocab);
        Trainer t(m, cfg, samples);
        std::vector<double> losses;
        for (int i = 0; i < 4; ++i) losses.push_back(t.step().total);
        return losses;
    };
    CHECK(run() == run());
}

TEST_CASE("a short run lowers the loss on four slices") {
    auto cfg = small_config();
    cfg.train.max_steps = 100;
    auto samples = samples_with_objects(cfg);
    samples.resize(4);
    const auto vocab = default_vocabulary();
    auto m = build_models(cfg, vocab);
    Trainer t(m, cfg, samples);
    CHECK(t.total_steps() == 100);
    std::vector<double> losses;
    for (int i = 0; i < 100; ++i) losses.push_back(t.step().total);
    auto window = [&](std::size_t from) {
        double s = 0;
        for (std::size_t i = from; i < from + 20; ++i) s += losses[i];
        return s / 20;
    };
    MESSAGE("first window " << window(0) << ", last window " << window(80));
    CHECK(window(80) < window(0));
    for (double l : losses) CHECK(std::isfinite(l));
}

TEST_CASE("routing tokens dispatch to exactly their heads") {
    const auto cfg = small_config();
    auto m = build_models(cfg, default_vocabulary());
    install_successor_table(m, kRoutes);
    const auto samples = samples_with_objects(cfg);
    const auto& img = samples.front().image;
    InferOptions opt;

    auto seg = infer(m, img, "can you segment the spleen in this slice", opt);
    CHECK(seg.text == "[seg]");
    CHECK((seg.emitted == std::set<RoutingKind>{RoutingKind::seg}));
    CHECK(seg.mask.has_value());
    CHECK_FALSE(seg.boxes.has_value());
    CHECK(seg.all_boxes.empty());

    auto det = infer(m, img, "can you locate the spleen with a box", opt);
    CHECK((det.emitted == std::set<RoutingKind>{RoutingKind::det}));
    CHECK_FALSE(det.mask.has_value());
    REQUIRE(det.boxes.has_value());
    CHECK(det.all_boxes.size() == static_cast<std::size_t>(cfg.perceiver.num_queries));
    for (std::size_t i = 1; i < det.boxes->size(); ++i) CHECK((*det.boxes)[i - 1].score >= (*det.boxes)[i].score);

    opt.theta_obj = 1.01;
    det = infer(m, img, "can you locate the spleen with a box", opt);
    REQUIRE(det.boxes.has_value());
    CHECK(det.boxes->empty());

    auto none = infer(m, img, "please segment the spleen", opt);
    CHECK(none.emitted.empty());
    CHECK_FALSE(none.mask.has_value());
    CHECK_FALSE(none.boxes.has_value());
}

TEST_CASE("closer look at inference uses the predicted mask") {
    const auto cfg = small_config();
    auto m = build_models(cfg, default_vocabulary());
    install_successor_table(m, kRoutes);
    const auto img = samples_with_objects(cfg).front().image;
    InferOptions opt;
    opt.closer = true;
    opt.theta_mask = 1e-9;  // the untrained head still yields a non-empty mask
    const auto r = infer(m, img, "can you segment the liver in this slice", opt);
    REQUIRE(r.mask.has_value());
    REQUIRE(r.round2.has_value());
    CHECK(r.round2->roi_source == RoiSource::predicted_mask);
    CHECK(r.round2->region == build_roi(r.mask->binary, opt.roi));
    CHECK(r.round2->text == "[closer]");
    CHECK((r.round2->binary.height == img.height && r.round2->binary.width == img.width));
    CHECK(r.round2->roi_mask.binary.height == cfg.perceiver.image_size);

    auto routes = kRoutes;
    routes["liver"] = "[seg]";
    routes["it"] = "[seg]";
    install_successor_table(m, routes);
    const auto dropped = infer(m, img, "can you segment the liver in this slice", opt);
    CHECK_FALSE(dropped.round2.has_value());
    CHECK(dropped.notes.size() == 1);

    const auto org = infer(m, img, "can you locate the liver with a box", opt);
    CHECK_FALSE(org.round2.has_value());
    CHECK(org.notes.size() == 1);
}

TEST_CASE("parallel evaluation matches serial evaluation") {
    auto cfg = small_config();
    auto m = build_models(cfg, default_vocabulary());
    install_successor_table(m, kRoutes);
    const auto samples = samples_with_objects(cfg);
    EvalOptions a;
    a.max_objects = 8;
    a.infer.closer = true;
    auto b = a;
    b.workers = 3;
    CHECK(evaluate(m, samples, a).to_json().dump() == evaluate(m, samples, b).to_json().dump());
}

TEST_CASE("checkpoints") {
    auto cfg = small_config();
    const auto samples = samples_with_objects(cfg);
    auto m = build_models(cfg, default_vocabulary());
    Trainer t(m, cfg, samples);
    for (int i = 0; i < 3; ++i) t.step();
    AdapterConfig ac;
    ac.rank = 2;
    m.attach_adapters(ac);

    testsupport::TempDir dir("ckpt");
    const auto path = dir.path() / "model.ckpt";
    save_checkpoint(path, m, cfg, {{"step", 3}});
    auto loaded = load_checkpoint(path);
    CHECK(loaded.extra["step"] == 3);
    auto resolved = cfg;
    resolved.reasoner.vocab_size = static_cast<int>(m.vocab->size());
    CHECK(loaded.config.to_json() == resolved.to_json());
    REQUIRE(loaded.models.adapter.has_value());
    CHECK(loaded.models.adapter->rank == 2);
    const auto ga = m.groups(), gb = loaded.models.groups();
    REQUIRE(ga.size() == gb.size());
    for (std::size_t g = 0; g < ga.size(); ++g) {
        CHECK(ga[g].first == gb[g].first);
        REQUIRE(ga[g].second.size() == gb[g].second.size());
        for (std::size_t i = 0; i < ga[g].second.size(); ++i) {
            CHECK(ga[g].second[i].first == gb[g].second[i].first);
            CHECK(torch::equal(ga[g].second[i].second, gb[g].second[i].second));
        }
    }
    InferOptions opt;
    const auto& img = samples.front().image;
    const auto& q = samples.front().objects.front().query;
    CHECK(infer(m, img, q, opt).text == infer(loaded.models, img, q, opt).text);

    CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.ckpt"), IoError);
    const auto bytes = png::read_file(path);
    png::write_file(dir.path() / "short.ckpt", std::span(bytes.data(), bytes.size() / 2));
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "short.ckpt"), IoError);
    auto bad = bytes;
    bad[0] = 'X';
    png::write_file(dir.path() / "magic.ckpt", bad);
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "magic.ckpt"), IoError);
}
