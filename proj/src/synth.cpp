#include "ctreason/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "ctreason/curation.hpp"
#include "ctreason/errors.hpp"
#include "ctreason/metrics.hpp"
#include "ctreason/rng.hpp"
#include "ctreason/templates.hpp"

namespace ctreason::synth {

namespace {

struct Blob {
    double cy, cx, ry, rx;
};

struct OrganSpec {
    std::string name;
    std::vector<Blob> instances;  ///< canonical 64x64 layout
    double intensity;
    bool fragmented = false;
};

const std::vector<OrganSpec>& organ_specs() {
    static const std::vector<OrganSpec> specs = {
        {"liver", {{26, 20, 10, 12}}, 0.55},
        {"spleen", {{24, 46, 6, 5}}, 0.65},
        {"kidney", {{40, 17, 4.5, 3.5}, {40, 47, 4.5, 3.5}}, 0.80},
        {"aorta", {{37, 32, 3, 3}}, 0.95},
        {"gallbladder", {{35, 26, 3, 2.5}}, 0.35},
        {"pancreas", {{48, 32, 1.5, 1.5}}, 0.45, true},
    };
    return specs;
}

constexpr double kBodyIntensity = 0.25;
constexpr double kRawScale = 2000.0;

struct EllipseInstance {
    double cy, cx, ry, rx, angle;
    int instance;
};

/// Per-subject randomisation of one organ.
struct OrganPlan {
    const OrganSpec* spec;
    std::vector<EllipseInstance> parts;
    double drift_y, drift_x;
    int onset, peak, offset;
};

double profile_factor(const OrganPlan& p, int s) {
    if (s < p.onset || s > p.offset) return 0.0;
    if (s <= p.peak) return 0.45 + 0.55 * (s - p.onset + 1.0) / (p.peak - p.onset + 1.0);
    return 0.45 + 0.55 * (p.offset - s + 1.0) / (p.offset - p.peak + 1.0);
}

OrganPlan plan_organ(const OrganSpec& spec, const SynthConfig& cfg, Rng& rng) {
    OrganPlan p{&spec, {}, rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), 0, 0, 0};
    const double k = cfg.size / 64.0;
    const double jy = rng.uniform(-2.5, 2.5), jx = rng.uniform(-2.5, 2.5);
    if (spec.fragmented) {
        const auto& b = spec.instances.front();
        const int n = rng.integer(cfg.fragments_min, std::max(cfg.fragments_min, cfg.fragments_max));
        const double spacing = rng.uniform(6.0, 7.0);
        for (int i = 0; i < n; ++i) {
            const double r = rng.uniform(1.3, 1.7);
            p.parts.push_back({(b.cy + jy + rng.uniform(-1.5, 1.5)) * k, (b.cx + jx + (i - (n - 1) / 2.0) * spacing) * k,
                               r * k, r * k, 0.0, 0});
        }
    } else {
        const double scale = cfg.size_scale * rng.uniform(0.85, 1.15);
        const double angle = rng.uniform(-0.5, 0.5);
        for (std::size_t i = 0; i < spec.instances.size(); ++i) {
            const auto& b = spec.instances[i];
            p.parts.push_back({(b.cy + jy) * k, (b.cx + jx) * k, b.ry * scale * k, b.rx * scale * k, angle,
                               static_cast<int>(i)});
        }
    }
    const int n = cfg.slices;
    p.onset = rng.integer(0, n / 4);
    p.offset = rng.integer(n - 1 - n / 4, n - 1);
    p.peak = p.offset - p.onset >= 2 ? rng.integer(p.onset + 1, p.offset - 1) : p.onset;
    return p;
}

bool inside(const EllipseInstance& e, double f, double dy, double dx, int y, int x) {
    const double ry = std::max(e.ry * f, 0.5), rx = std::max(e.rx * f, 0.5);
    const double py = y + 0.5 - (e.cy + dy), px = x + 0.5 - (e.cx + dx);
    const double c = std::cos(e.angle), s = std::sin(e.angle);
    const double v = c * py - s * px, u = s * py + c * px;
    return (v * v) / (ry * ry) + (u * u) / (rx * rx) <= 1.0;
}

std::string format_id(const char* prefix, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s_%03d", prefix, i);
    return buf;
}

data::Task pick_task(const SynthConfig& cfg, Rng& rng) {
    const double u = rng.uniform();
    if (u < cfg.p_seg) return data::Task::seg;
    if (u < cfg.p_seg + cfg.p_det) return data::Task::det;
    return data::Task::both;
}

Subject make_subject(const SynthConfig& cfg, int index, const std::vector<const OrganSpec*>& organs, Rng& rng) {
    Subject subj;
    subj.id = format_id("subj", index);
    const int h = cfg.size, w = cfg.size;
    std::vector<OrganPlan> plans;
    for (const auto* spec : organs) plans.push_back(plan_organ(*spec, cfg, rng));

    for (int s = 0; s < cfg.slices; ++s) {
        // label: -1 outside body, 0 body, k+1 organ plan k. instance: drawn part index.
        Grid<int> label(h, w, -1), instance(h, w, -1);
        const double by = h / 2.0, bx = w / 2.0, bry = h * 26.0 / 64, brx = w * 29.0 / 64;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                const double dy = (y + 0.5 - by) / bry, dx = (x + 0.5 - bx) / brx;
                if (dy * dy + dx * dx <= 1.0) label(y, x) = 0;
            }
        for (std::size_t k = 0; k < plans.size(); ++k) {
            const auto& p = plans[k];
            double f = profile_factor(p, s);
            if (f <= 0) continue;
            // Fragments keep their size; their count and spread carry the appearance.
            if (p.spec->fragmented) f = 1.0;
            const double dy = p.drift_y * (s - cfg.slices / 2.0), dx = p.drift_x * (s - cfg.slices / 2.0);
            for (const auto& e : p.parts) {
                const int y0 = std::max(0, static_cast<int>(e.cy + dy - e.ry - e.rx - 2));
                const int y1 = std::min(h - 1, static_cast<int>(e.cy + dy + e.ry + e.rx + 2));
                const int x0 = std::max(0, static_cast<int>(e.cx + dx - e.ry - e.rx - 2));
                const int x1 = std::min(w - 1, static_cast<int>(e.cx + dx + e.ry + e.rx + 2));
                for (int y = y0; y <= y1; ++y)
                    for (int x = x0; x <= x1; ++x)
                        if (label(y, x) >= 0 && inside(e, f, dy, dx, y, x)) {
                            label(y, x) = static_cast<int>(k) + 1;
                            instance(y, x) = e.instance;
                        }
            }
        }

        data::MultimodalSample sample;
        sample.subject = subj.id;
        sample.slice_id = format_id("slice", s);
        sample.slice_index = s;
        sample.raw = Grid<std::uint16_t>(h, w);
        for (std::size_t i = 0; i < label.data.size(); ++i) {
            double v = 0.0;
            if (label.data[i] == 0) v = kBodyIntensity;
            if (label.data[i] > 0) v = plans[static_cast<std::size_t>(label.data[i] - 1)].spec->intensity;
            v += cfg.noise * rng.normal();
            sample.raw.data[i] = static_cast<std::uint16_t>(std::clamp(std::lround(v * kRawScale), 0L, 65535L));
        }
        sample.image = window_minmax(sample.raw);

        std::vector<data::ObjectAnnotation> objects;
        for (std::size_t k = 0; k < plans.size(); ++k) {
            const auto& spec = *plans[k].spec;
            Mask m(h, w);
            const int n_inst = static_cast<int>(spec.instances.size());
            std::vector<Mask> inst(static_cast<std::size_t>(n_inst), Mask(h, w));
            for (std::size_t i = 0; i < label.data.size(); ++i)
                if (label.data[i] == static_cast<int>(k) + 1) {
                    m.data[i] = 1;
                    inst[static_cast<std::size_t>(instance.data[i])].data[i] = 1;
                }
            auto& boxes_per_slice = subj.instance_boxes[spec.name];
            boxes_per_slice.resize(static_cast<std::size_t>(cfg.slices));
            std::vector<PixelRegion> boxes;
            for (const auto& im : inst)
                if (!empty(im)) boxes.push_back(metrics::tight_region(im));
            boxes_per_slice[static_cast<std::size_t>(s)] = boxes;

            // Draw the task unconditionally so the stream does not depend on presence.
            const auto task = pick_task(cfg, rng);
            const auto q_seed = rng.next();
            if (foreground_count(m) < static_cast<std::size_t>(cfg.min_object_area)) continue;

            data::ObjectAnnotation o;
            o.organ = spec.name;
            o.task = task;
            const auto& queries = templates::round1_queries(task);
            o.query = templates::fill(queries[templates::pick(q_seed, queries.size())], spec.name);
            const auto g = curation::describe_geometry(metrics::tight_region(m), h, w);
            o.answer = templates::round1_answer(spec.name, g, task);
            o.boxes = boxes;
            o.mask_file = "mask_" + spec.name + ".png";
            o.mask = std::move(m);
            objects.push_back(std::move(o));
        }
        if (cfg.max_objects_per_slice > 0 && static_cast<int>(objects.size()) > cfg.max_objects_per_slice) {
            std::vector<std::size_t> idx(objects.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            for (std::size_t i = idx.size() - 1; i > 0; --i) std::swap(idx[i], idx[rng.next() % (i + 1)]);
            idx.resize(static_cast<std::size_t>(cfg.max_objects_per_slice));
            std::sort(idx.begin(), idx.end());
            std::vector<data::ObjectAnnotation> kept;
            for (auto i : idx) kept.push_back(std::move(objects[i]));
            objects = std::move(kept);
        }
        sample.objects = std::move(objects);
        data::validate(sample);
        subj.slices.push_back(std::move(sample));
    }
    return subj;
}

}  // namespace

SynthConfig apply_profile(SynthConfig cfg) {
    if (cfg.profile == "standard") {
        cfg.size_scale = 1.0;
    } else if (cfg.profile == "small") {
        cfg.size_scale = 0.45;
        cfg.organs = {"liver", "spleen", "kidney", "aorta", "gallbladder"};
        cfg.p_seg = 1.0;
        cfg.p_det = 0.0;
        cfg.min_object_area = 4;
    } else if (cfg.profile == "fragmented") {
        cfg.organs = {"pancreas"};
        cfg.p_seg = 0.0;
        cfg.p_det = 0.0;
    } else {
        throw ConfigError("unknown synth profile '" + cfg.profile + "'");
    }
    return cfg;
}

std::vector<data::MultimodalSample> Dataset::samples(const std::string& split) const {
    std::vector<data::MultimodalSample> out;
    const auto it = splits.find(split);
    if (it == splits.end()) return out;
    for (const auto& id : it->second)
        for (const auto& subj : subjects)
            if (subj.id == id)
                for (const auto& s : subj.slices)
                    if (!s.objects.empty()) out.push_back(s);
    return out;
}

Dataset generate(const SynthConfig& cfg) {
    if (cfg.subjects < 1 || cfg.slices < 1) throw ConfigError("synth needs at least one subject and one slice");
    if (cfg.size < 16) throw ConfigError("synth image size must be at least 16");
    if (cfg.p_seg < 0 || cfg.p_det < 0 || cfg.p_seg + cfg.p_det > 1.0 + 1e-12)
        throw ConfigError("task probabilities must be nonnegative and sum to at most 1");
    if (cfg.fragments_min < 1 || cfg.fragments_max < cfg.fragments_min) throw ConfigError("bad fragment range");

    std::vector<const OrganSpec*> organs;
    for (const auto& spec : organ_specs())
        if (cfg.organs.empty() || std::find(cfg.organs.begin(), cfg.organs.end(), spec.name) != cfg.organs.end())
            organs.push_back(&spec);
    for (const auto& name : cfg.organs)
        if (std::none_of(organs.begin(), organs.end(), [&](const OrganSpec* s) { return s->name == name; }))
            throw ConfigError("unknown organ '" + name + "'");

    Rng rng(cfg.seed);
    Dataset ds;
    for (int i = 0; i < cfg.subjects; ++i) {
        Rng subject_rng(rng.next());
        ds.subjects.push_back(make_subject(cfg, i, organs, subject_rng));
    }
    const int n = cfg.subjects;
    const int n_train = std::clamp(static_cast<int>(std::lround(n * cfg.train_frac)), 0, n);
    const int n_val = std::clamp(static_cast<int>(std::lround(n * cfg.val_frac)), 0, n - n_train);
    for (int i = 0; i < n; ++i) {
        const char* split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
        ds.splits[split].push_back(ds.subjects[static_cast<std::size_t>(i)].id);
    }
    for (const char* split : {"train", "val", "test"}) ds.splits[split];
    return ds;
}

void write(const std::filesystem::path& root, const Dataset& ds) {
    std::filesystem::create_directories(root);
    for (const auto& subj : ds.subjects)
        for (const auto& s : subj.slices) data::save_sample(root, s);
    for (const auto& [split, ids] : ds.splits) data::write_split(root, split, ids);
}

std::map<std::string, std::vector<Mask>> organ_series(const Subject& s, int size) {
    std::map<std::string, std::vector<Mask>> out;
    for (const auto& [organ, per_slice] : s.instance_boxes) out[organ].assign(per_slice.size(), Mask(size, size));
    for (std::size_t i = 0; i < s.slices.size(); ++i)
        for (const auto& o : s.slices[i].objects) out[o.organ][i] = o.mask;
    return out;
}

}  // namespace ctreason::synth
