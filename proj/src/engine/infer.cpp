#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>
#include <cstdio>
#include <sstream>

#include "ctreason/engine/engine.hpp"
#include "ctreason/errors.hpp"
#include "ctreason/rng.hpp"
#include "ctreason/templates.hpp"

namespace ctreason::engine {

using tokenizer::RoutingKind;
using tokenizer::Special;

InferOptions InferOptions::from(const InferConfig& c) {
    InferOptions o;
    o.theta_obj = c.theta_obj;
    o.theta_mask = c.theta_mask;
    o.roi = {c.margin_frac, c.square_roi};
    o.max_new = c.max_new;
    return o;
}

std::string organ_in_query(const std::string& query) {
    const auto words = tokenizer::split_tokens(query);
    for (const auto& w : words)
        for (const auto& organ : templates::organ_names())
            if (w == organ) return organ;
    return {};
}

namespace {

ProbGrid to_prob(const torch::Tensor& logits) {
    const auto p = torch::sigmoid(logits).to(torch::kFloat32).contiguous();
    ProbGrid g(static_cast<int>(p.size(0)), static_cast<int>(p.size(1)));
    std::copy(p.data_ptr<float>(), p.data_ptr<float>() + p.numel(), g.data.begin());
    return g;
}

struct Generated {
    reasoner::GenerationResult gen;
    std::string text;
};

Generated run_reasoner(Models& m, const torch::Tensor& image, const std::string& query, int max_new) {
    const auto& vocab = *m.vocab;
    const auto feats = reasoner::patchify(image.unsqueeze(0), m.reasoner_cfg.patch);
    Generated g;
    g.gen = m.reasoner->generate(feats, vocab.encode(query), max_new, vocab);
    auto shown = g.gen.answer;
    if (!shown.empty() && shown.back() == vocab.id(Special::eos)) shown.pop_back();
    g.text = vocab.decode(shown);
    return g;
}

MaskOutput segment_with(Models& m, const perceiver::FeatureMap& fm, const reasoner::GenerationResult& gen,
                        RoutingKind kind, double theta) {
    const auto h = reasoner::extract_routing_embedding(gen, kind).unsqueeze(0);
    const auto logits = m.perceiver->segment(fm, m.perceiver->project_embedding(h))[0];
    MaskOutput out;
    out.prob = to_prob(logits);
    out.binary = threshold(out.prob, static_cast<float>(theta));
    return out;
}

}  // namespace

InferenceResult infer(Models& models, const ImageGrid& image, const std::string& query, const InferOptions& opt) {
    torch::NoGradGuard no_grad;
    // Only flip the mode when needed so concurrent evaluation workers never write it.
    if (models.reasoner->is_training() || models.perceiver->is_training()) models.train(false);
    const auto img = reasoner::to_tensor(image, models.dtype);
    InferenceResult res;
    auto r1 = run_reasoner(models, img, query, opt.max_new);
    res.text = r1.text;
    res.answer = r1.gen.answer;
    for (const auto& r : r1.gen.routing) res.emitted.insert(r.kind);

    const bool want_seg = res.emitted.count(RoutingKind::seg) > 0;
    const bool want_det = res.emitted.count(RoutingKind::det) > 0;
    perceiver::FeatureMap fm;
    if (want_seg || want_det) fm = models.perceiver->encode_image(img.unsqueeze(0));
    if (want_seg) res.mask = segment_with(models, fm, r1.gen, RoutingKind::seg, opt.theta_mask);
    if (want_det) {
        const auto h = reasoner::extract_routing_embedding(r1.gen, RoutingKind::det).unsqueeze(0);
        const auto out = models.perceiver->detect(fm, models.perceiver->project_embedding(h));
        const auto boxes = out.boxes[0].to(torch::kFloat64).contiguous();
        const auto scores = out.scores[0].to(torch::kFloat64).contiguous();
        const double* b = boxes.data_ptr<double>();
        const double* s = scores.data_ptr<double>();
        std::vector<BoxHypothesis> kept;
        for (std::int64_t k = 0; k < scores.size(0); ++k) {
            BoxHypothesis hyp{{b[4 * k], b[4 * k + 1], b[4 * k + 2], b[4 * k + 3]}, s[k]};
            res.all_boxes.push_back(hyp);
            if (hyp.score >= opt.theta_obj) kept.push_back(hyp);
        }
        std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& c) { return a.score > c.score; });
        res.boxes = std::move(kept);
    }

    if (!opt.closer) return res;
    if (!res.mask) {
        res.notes.push_back("closer look skipped: round 1 produced no mask");
        return res;
    }
    if (empty(res.mask->binary)) {
        res.notes.push_back("closer look refused: round-1 mask is empty");
        return res;
    }
    const auto organ = organ_in_query(query);
    if (organ.empty()) {
        res.notes.push_back("closer look skipped: no organ named in the query");
        return res;
    }
    Round2Output r2;
    r2.region = build_roi(res.mask->binary, opt.roi);
    r2.query = templates::fill(templates::round2_queries()[templates::pick(opt.seed, templates::round2_queries().size())],
                               organ);
    const auto crop_img = crop(image, nullptr, r2.region, image.height, image.width);
    const auto crop_t = reasoner::to_tensor(crop_img.image, models.dtype);
    auto g2 = run_reasoner(models, crop_t, r2.query, opt.max_new);
    r2.text = g2.text;
    bool has_closer = false;
    for (const auto& r : g2.gen.routing) has_closer |= r.kind == RoutingKind::closer;
    if (!has_closer) {
        res.notes.push_back("closer look dropped: round-2 answer has no [closer] token");
        return res;
    }
    const auto fm2 = models.perceiver->encode_image(crop_t.unsqueeze(0));
    r2.roi_mask = segment_with(models, fm2, g2.gen, RoutingKind::closer, opt.theta_mask);
    r2.prob = paste_back(r2.roi_mask.prob, r2.region, image.height, image.width);
    r2.binary = paste_back(r2.roi_mask.binary, r2.region, image.height, image.width);
    r2.roi_source = RoiSource::predicted_mask;
    res.round2 = std::move(r2);
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

std::set<RoutingKind> expected_kinds(data::Task t) {
    std::set<RoutingKind> k;
    if (data::wants_seg(t)) k.insert(RoutingKind::seg);
    if (data::wants_det(t)) k.insert(RoutingKind::det);
    return k;
}

}  // namespace

EvalResult evaluate(Models& models, const std::vector<data::MultimodalSample>& samples, const EvalOptions& opt) {
    struct Job {
        const data::MultimodalSample* sample;
        const data::ObjectAnnotation* object;
    };
    std::vector<Job> jobs;
    for (const auto& s : samples)
        for (const auto& o : s.objects) {
            if (opt.task && o.task != *opt.task) continue;
            if (opt.max_objects && jobs.size() >= opt.max_objects) break;
            jobs.push_back({&s, &o});
        }

    models.train(false);
    std::vector<InferenceResult> results(jobs.size());
    auto run = [&](std::size_t i) {
        auto io = opt.infer;
        io.seed = mix_seed(opt.infer.seed, i + 1);
        results[i] = infer(models, jobs[i].sample->image, jobs[i].object->query, io);
    };
    const auto workers = static_cast<std::size_t>(std::max(1, opt.workers));
    if (workers == 1 || jobs.size() < 2) {
        for (std::size_t i = 0; i < jobs.size(); ++i) run(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex fail_mu;
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < std::min(workers, jobs.size()); ++w)
            pool.emplace_back([&] {
                for (std::size_t i; (i = next++) < jobs.size();) {
                    try {
                        run(i);
                    } catch (...) {
                        std::lock_guard lock(fail_mu);
                        if (!failure) failure = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
        if (failure) std::rethrow_exception(failure);
    }

    EvalResult out;
    out.objects = jobs.size();
    metrics::ReportBuilder main, area, maxprob;
    std::size_t routed = 0;
    double r1d = 0, r2d = 0, r1h = 0, r2h = 0;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        const auto& s = *jobs[i].sample;
        const auto& o = *jobs[i].object;
        const auto& res = results[i];
        if (res.emitted == expected_kinds(o.task)) ++routed;

        const int h = s.image.height, w = s.image.width;
        if (data::wants_seg(o.task)) {
            const Mask pred = res.mask ? res.mask->binary : Mask(h, w, 0);
            const double d = metrics::dice_score(pred, o.mask);
            const double hd = metrics::hd95(pred, o.mask);
            if (empty(pred) != empty(o.mask)) ++out.hd95_sentinels;
            main.add_dice(o.organ, d);
            main.add_hd95(o.organ, hd);
            if (opt.infer.closer) {
                const Mask p2 = res.round2 ? res.round2->binary : pred;
                r1d += d;
                r1h += hd;
                r2d += metrics::dice_score(p2, o.mask);
                r2h += metrics::hd95(p2, o.mask);
                ++out.paired;
                if (res.round2) ++out.round2_count;
            }
        }
        if (data::wants_det(o.task)) {
            std::vector<Box> gts;
            for (const auto& b : o.boxes) gts.push_back(normalize(b, h, w));
            main.add_detection(o.organ, res.boxes.value_or(std::vector<BoxHypothesis>{}), gts);
            std::vector<BoxHypothesis> ba, bm;
            if (res.mask) {
                ba = metrics::mask_to_boxes(res.mask->prob, opt.infer.theta_mask, metrics::BoxConfidence::area);
                bm = metrics::mask_to_boxes(res.mask->prob, opt.infer.theta_mask, metrics::BoxConfidence::maxprob);
            }
            area.add_detection(o.organ, ba, gts);
            maxprob.add_detection(o.organ, bm, gts);
        }
    }
    out.report = main.build();
    out.map_area = area.build().mean_map;
    out.map_maxprob = maxprob.build().mean_map;
    out.routing_accuracy = out.objects ? static_cast<double>(routed) / out.objects : 0.0;
    if (out.paired) {
        const double n = static_cast<double>(out.paired);
        out.round1_dice = r1d / n;
        out.round2_dice = r2d / n;
        out.round1_hd95 = r1h / n;
        out.round2_hd95 = r2h / n;
    }
    auto& ex = out.report.extras;
    ex["objects"] = static_cast<double>(out.objects);
    ex["routing_accuracy"] = out.routing_accuracy;
    ex["hd95_sentinels"] = static_cast<double>(out.hd95_sentinels);
    ex["map_mask_to_box_area"] = out.map_area;
    ex["map_mask_to_box_maxprob"] = out.map_maxprob;
    if (opt.infer.closer) {
        ex["round1_dice"] = out.round1_dice;
        ex["round2_dice"] = out.round2_dice;
        ex["round1_hd95"] = out.round1_hd95;
        ex["round2_hd95"] = out.round2_hd95;
        ex["round2_count"] = static_cast<double>(out.round2_count);
        ex["paired"] = static_cast<double>(out.paired);
    }
    out.report.conventions["round2_missing"] = "falls back to the round-1 mask";
    out.report.conventions["boxes"] = "detection boxes filtered by theta_obj before ranking";
    return out;
}

nlohmann::ordered_json EvalResult::to_json() const {
    auto j = nlohmann::ordered_json::parse(report.to_json());
    return j;
}

std::string EvalResult::to_table() const {
    std::ostringstream os;
    os << report.to_table();
    char buf[160];
    std::snprintf(buf, sizeof buf, "Routing accuracy: %.2f%% over %zu objects\n", 100 * routing_accuracy, objects);
    os << buf;
    std::snprintf(buf, sizeof buf, "mAP@0.1 detection branch %.2f | mask->box area %.2f | mask->box maxprob %.2f\n",
                  100 * report.mean_map, 100 * map_area, 100 * map_maxprob);
    os << buf;
    if (paired) {
        os << "Closer look      Dice     HD95\n";
        std::snprintf(buf, sizeof buf, "round 1       %6.2f  %7.2f\nround 2       %6.2f  %7.2f\n", 100 * round1_dice,
                      round1_hd95, 100 * round2_dice, round2_hd95);
        os << buf;
        std::snprintf(buf, sizeof buf, "(%zu of %zu objects got a round-2 mask)\n", round2_count, paired);
        os << buf;
    }
    return os.str();
}

}  // namespace ctreason::engine
