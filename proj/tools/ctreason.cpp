// ctreason command-line entry point: synth | train | eval | infer | curate {filter,prompts,generate,serve}.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctreason/config.hpp"
#include "ctreason/curation.hpp"
#include "ctreason/data.hpp"
#include "ctreason/engine/engine.hpp"
#include "ctreason/errors.hpp"
#include "ctreason/review.hpp"
#include "ctreason/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;
using namespace ctreason;

namespace {

enum Exit { kOk = 0, kConfig = 2, kNumeric = 3, kIo = 4, kOther = 1 };

struct CommonOpts {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config, "Run config (commented JSON)");
    cmd->add_option("--seed", o.seed, "Seed overriding the config");
    cmd->add_option("--set", o.sets, "Override, e.g. --set optim.lr=0.003 (repeatable)");
}

RunConfig resolve(const CommonOpts& o) {
    RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
    for (const auto& s : o.sets) apply_override(cfg, s);
    if (o.seed) {
        cfg.seed = *o.seed;
        cfg.synth.seed = *o.seed;
    }
    cfg.validate();
    return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path.string());
    f << text;
    if (!f) throw IoError("short write on " + path.string());
}

std::string read_all(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(line);
    return out;
}

std::optional<data::Task> parse_task(const std::string& s) {
    if (s == "both") return std::nullopt;  // every object regardless of its routing
    if (s == "seg") return data::Task::seg;
    if (s == "det") return data::Task::det;
    throw ConfigError("--task must be seg, det or both");
}

engine::EvalOptions eval_options(const RunConfig& cfg) {
    engine::EvalOptions eo;
    eo.infer = engine::InferOptions::from(cfg.infer);
    eo.infer.seed = cfg.seed;
    eo.workers = cfg.infer.workers;
    return eo;
}

Mask to_mask255(const Mask& m) {
    Mask out = m;
    for (auto& v : out.data) v = v ? 255 : 0;
    return out;
}

json box_json(const BoxHypothesis& b) {
    return {{"box", {b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max}}, {"score", b.score}};
}

json region_json(const PixelRegion& r) { return {r.x_min, r.y_min, r.x_max, r.y_max}; }

// ---------------------------------------------------------------------------

int cmd_synth(const CommonOpts& common, const std::string& out_arg) {
    const auto cfg = resolve(common);
    const fs::path out = out_arg.empty() ? fs::path(cfg.paths.data_root) : fs::path(out_arg);
    const auto ds = synth::generate(cfg.synth);
    synth::write(out, ds);
    write_text(out / "synth_config.json", cfg.to_json().dump(2) + "\n");
    std::size_t slices = 0, objects = 0;
    for (const auto& s : ds.subjects) {
        slices += s.slices.size();
        for (const auto& sl : s.slices) objects += sl.objects.size();
    }
    std::printf("wrote %zu subjects, %zu slices, %zu objects to %s\n", ds.subjects.size(), slices, objects,
                out.string().c_str());
    return kOk;
}

json param_stats(engine::Models& models) {
    json stats = json::object();
    for (auto& [group, params] : models.groups()) {
        std::int64_t nonfinite = 0, grad_nonfinite = 0;
        double max_abs = 0;
        for (auto& [name, t] : params) {
            const auto d = t.detach();
            nonfinite += (~torch::isfinite(d)).sum().item<std::int64_t>();
            if (d.numel()) max_abs = std::max(max_abs, d.abs().max().item<double>());
            if (t.grad().defined()) grad_nonfinite += (~torch::isfinite(t.grad())).sum().item<std::int64_t>();
        }
        stats[group] = {{"nonfinite_values", nonfinite}, {"nonfinite_grads", grad_nonfinite}, {"max_abs", max_abs}};
    }
    return stats;
}

int cmd_train(const CommonOpts& common, const std::string& data_arg, const std::string& run_arg) {
    auto cfg = resolve(common);
    if (!data_arg.empty()) cfg.paths.data_root = data_arg;
    if (!run_arg.empty()) cfg.paths.run_dir = run_arg;
    const fs::path run_dir = cfg.paths.run_dir;
    auto train = data::load_split(cfg.paths.data_root, "train");
    auto val = data::load_split(cfg.paths.data_root, "val");
    if (train.empty()) throw IoError("no training samples under " + cfg.paths.data_root);
    if (static_cast<int>(val.size()) > cfg.train.max_eval_samples) val.resize(cfg.train.max_eval_samples);

    const auto vocab = engine::default_vocabulary();
    auto models = engine::build_models(cfg, vocab);
    cfg.reasoner.vocab_size = models.reasoner_cfg.vocab_size;
    fs::create_directories(run_dir);
    write_text(run_dir / "config.json", cfg.to_json().dump(2) + "\n");

    engine::Trainer trainer(models, cfg, train);
    const int total = trainer.total_steps();
    const auto per_epoch = static_cast<int>(
        (trainer.objects_per_epoch() + cfg.train.batch_size * cfg.optim.grad_accum - 1) /
        (static_cast<std::size_t>(cfg.train.batch_size) * cfg.optim.grad_accum));
    const int eval_every = cfg.train.eval_every > 0 ? cfg.train.eval_every : std::max(1, per_epoch);
    std::ofstream log(run_dir / "train_log.jsonl");
    if (!log) throw IoError("cannot write " + (run_dir / "train_log.jsonl").string());

    double best = -1;
    int best_step = -1;
    engine::LossBreakdown last;
    json history = json::array();
    std::printf("training %d steps on %zu objects (%zu samples)\n", total, trainer.objects_per_epoch(), train.size());
    while (trainer.steps_done() < total) {
        engine::LossBreakdown lb;
        try {
            lb = trainer.step();
        } catch (const NumericError& e) {
            json dump = {{"step", trainer.steps_done()},
                         {"error", e.what()},
                         {"last_finite", {{"language", last.language},
                                          {"seg", last.seg},
                                          {"det", last.det},
                                          {"total", last.total},
                                          {"grad_norm", last.grad_norm}}},
                         {"lr", cfg.optim.lr_at(trainer.steps_done(), total)},
                         {"parameters", param_stats(models)}};
            write_text(run_dir / "nan_dump.json", dump.dump(2) + "\n");
            std::fprintf(stderr, "numeric failure at step %d: %s (diagnostics in %s)\n", trainer.steps_done(), e.what(),
                         (run_dir / "nan_dump.json").string().c_str());
            return kNumeric;
        }
        last = lb;
        const int step = trainer.steps_done();
        log << json{{"step", step},
                    {"lr", cfg.optim.lr_at(step - 1, total)},
                    {"language", lb.language},
                    {"seg", lb.seg},
                    {"det", lb.det},
                    {"total", lb.total},
                    {"grad_norm", lb.grad_norm}}
                   .dump()
            << "\n";
        if (cfg.train.log_every > 0 && (step % cfg.train.log_every == 0 || step == 1))
            std::printf("step %5d  total %.4f  lang %.4f  seg %.4f  det %.4f  |g| %.3f\n", step, lb.total, lb.language,
                        lb.seg, lb.det, lb.grad_norm);
        if (step % eval_every == 0 || step == total) {
            double dice = 0;
            if (!val.empty()) dice = engine::evaluate(models, val, eval_options(cfg)).report.mean_dice;
            history.push_back({{"step", step}, {"val_dice", dice}});
            std::printf("step %5d  val Dice %.2f\n", step, 100 * dice);
            if (dice > best) {
                best = dice;
                best_step = step;
                engine::save_checkpoint(run_dir / "best.ckpt", models, cfg, {{"step", step}, {"val_dice", dice}});
            }
        }
    }
    log.flush();
    engine::save_checkpoint(run_dir / "last.ckpt", models, cfg, {{"step", trainer.steps_done()}});
    ordered_json summary = {{"steps", trainer.steps_done()},
                            {"best_step", best_step},
                            {"best_val_dice", best},
                            {"final_total_loss", last.total},
                            {"validation", history}};
    write_text(run_dir / "metrics.json", summary.dump(2) + "\n");
    std::printf("best val Dice %.2f at step %d; checkpoints in %s\n", 100 * best, best_step, run_dir.string().c_str());
    return kOk;
}

/// Loads a checkpoint and lets --config / --set adjust the inference-time settings.
engine::LoadedCheckpoint open_checkpoint(const CommonOpts& common, const std::string& ckpt, RunConfig& cfg) {
    auto loaded = engine::load_checkpoint(ckpt);
    cfg = loaded.config;
    if (!common.config.empty()) {
        const auto file = load_config(common.config);
        cfg.infer = file.infer;
        cfg.paths = file.paths;
    }
    for (const auto& s : common.sets) apply_override(cfg, s);
    if (common.seed) cfg.seed = *common.seed;
    cfg.validate();
    return loaded;
}

int cmd_eval(const CommonOpts& common, std::string ckpt, const std::string& split, const std::string& task,
             bool closer, std::size_t max_objects, int workers, std::string out_arg, const std::string& data_arg) {
    RunConfig cfg;
    const auto task_filter = parse_task(task);
    auto run_default = fs::path(resolve(common).paths.run_dir);
    if (ckpt.empty()) ckpt = (run_default / "best.ckpt").string();
    auto loaded = open_checkpoint(common, ckpt, cfg);
    if (!data_arg.empty()) cfg.paths.data_root = data_arg;
    const auto samples = data::load_split(cfg.paths.data_root, split);
    auto eo = eval_options(cfg);
    eo.task = task_filter;
    eo.infer.closer = closer;
    eo.max_objects = max_objects;
    if (workers > 0) eo.workers = workers;
    const auto res = engine::evaluate(loaded.models, samples, eo);
    const fs::path out = out_arg.empty() ? fs::path(ckpt).parent_path() / ("eval_" + split + (closer ? "_closer" : ""))
                                         : fs::path(out_arg);
    auto j = res.to_json();
    j["split"] = split;
    j["task"] = task;
    j["closer"] = closer;
    j["checkpoint"] = ckpt;
    write_text(out / "eval.json", j.dump(2) + "\n");
    write_text(out / "eval.txt", res.to_table());
    std::cout << res.to_table();
    return kOk;
}

ImageGrid load_image(const fs::path& path, int size) {
    const auto bytes = png::read_file(path);
    const auto dec = png::decode(bytes);
    Grid<std::uint16_t> raw(dec.height, dec.width);
    for (std::size_t i = 0; i < raw.data.size(); ++i) raw.data[i] = dec.samples[i * dec.channels];
    auto img = window_minmax(raw);
    if (img.height != size || img.width != size)
        img = resize_bilinear(img, PixelRegion{0, 0, img.width - 1, img.height - 1}, size, size);
    return img;
}

int cmd_infer(const CommonOpts& common, const std::string& ckpt, const std::string& image_path,
              const std::string& query, bool closer, const std::string& out_arg) {
    RunConfig cfg;
    auto loaded = open_checkpoint(common, ckpt, cfg);
    const auto image = load_image(image_path, cfg.reasoner.image_size);
    auto opt = engine::InferOptions::from(cfg.infer);
    opt.closer = closer;
    opt.seed = cfg.seed;
    const auto res = engine::infer(loaded.models, image, query, opt);

    const fs::path out = out_arg.empty() ? fs::path("infer_out") : fs::path(out_arg);
    fs::create_directories(out);
    write_text(out / "answer.txt", res.text + "\n");
    ordered_json summary = {{"query", query}, {"text", res.text}};
    json emitted = json::array();
    for (auto k : res.emitted) emitted.push_back(tokenizer::routing_name(k));
    summary["emitted"] = emitted;
    if (res.mask) {
        png::write_file(out / "mask.png", png::encode_gray8(to_mask255(res.mask->binary)));
        summary["mask"] = "mask.png";
        summary["mask_pixels"] = foreground_count(res.mask->binary);
    }
    if (res.boxes) {
        json boxes = json::array(), all = json::array();
        for (const auto& b : *res.boxes) boxes.push_back(box_json(b));
        for (const auto& b : res.all_boxes) all.push_back(box_json(b));
        write_text(out / "boxes.json", json{{"boxes", boxes}, {"all_hypotheses", all}}.dump(2) + "\n");
        summary["boxes"] = boxes;
    }
    if (res.round2) {
        const auto& r2 = *res.round2;
        png::write_file(out / "round2_mask.png", png::encode_gray8(to_mask255(r2.binary)));
        png::write_file(out / "round2_roi_mask.png", png::encode_gray8(to_mask255(r2.roi_mask.binary)));
        summary["round2"] = {{"query", r2.query},
                             {"text", r2.text},
                             {"roi", region_json(r2.region)},
                             {"mask", "round2_mask.png"},
                             {"roi_mask", "round2_roi_mask.png"}};
    }
    summary["notes"] = res.notes;
    write_text(out / "result.json", summary.dump(2) + "\n");
    std::cout << res.text << "\n";
    for (const auto& n : res.notes) std::cout << "note: " << n << "\n";
    return kOk;
}

// ---------------------------------------------------------------------------
// Curation

std::vector<std::string> all_subjects(const fs::path& root) {
    std::set<std::string> ids;
    for (const char* split : {"train", "val", "test"})
        if (fs::exists(root / (std::string(split) + ".txt")))
            for (const auto& id : data::read_split(root, split)) ids.insert(id);
    if (ids.empty()) throw IoError("no split files under " + root.string());
    return {ids.begin(), ids.end()};
}

curation::VolumeMaskSeries series_of(const std::vector<data::MultimodalSample>& slices) {
    curation::VolumeMaskSeries series;
    if (slices.empty()) return series;
    const int h = slices.front().image.height, w = slices.front().image.width;
    for (const auto& s : slices)
        for (const auto& o : s.objects) series.organs.try_emplace(o.organ, slices.size(), Mask(h, w));
    for (std::size_t i = 0; i < slices.size(); ++i)
        for (const auto& o : slices[i].objects) series.organs[o.organ][i] = o.mask;
    return series;
}

int cmd_curate_filter(const CommonOpts& common) {
    const auto cfg = resolve(common);
    const fs::path root = cfg.paths.data_root;
    ordered_json retained = ordered_json::object();
    std::size_t kept = 0, total = 0;
    for (const auto& subject : all_subjects(root)) {
        const auto slices = data::load_subject(root, subject);
        const auto idx = curation::filter_slices(series_of(slices), cfg.curation.filter);
        json ids = json::array();
        for (int i : idx) ids.push_back(slices[static_cast<std::size_t>(i)].slice_id);
        retained[subject] = ids;
        kept += idx.size();
        total += slices.size();
    }
    const fs::path out = fs::path(cfg.paths.curation_dir) / "retained.json";
    write_text(out, retained.dump(2) + "\n");
    std::printf("retained %zu of %zu slices -> %s\n", kept, total, out.string().c_str());
    return kOk;
}

int cmd_curate_prompts(const CommonOpts& common) {
    const auto cfg = resolve(common);
    const fs::path root = cfg.paths.data_root;
    const fs::path cdir = cfg.paths.curation_dir;
    const auto retained = json::parse(read_all(cdir / "retained.json"));
    fs::create_directories(cdir);
    std::ofstream out(cdir / "prompts.jsonl");
    if (!out) throw IoError("cannot write " + (cdir / "prompts.jsonl").string());
    std::size_t n = 0;
    for (const auto& [subject, ids] : retained.items()) {
        const std::set<std::string> keep(ids.begin(), ids.end());
        for (const auto& s : data::load_subject(root, subject)) {
            if (!keep.count(s.slice_id)) continue;
            for (const auto& o : s.objects) {
                if (empty(o.mask)) continue;
                const auto vp = curation::derive_visual_prompts(o.mask);
                const curation::ImageMeta meta{subject, s.slice_id, s.image.height, s.image.width};
                const auto base = fs::path(subject) / s.slice_id;
                out << json{{"subject", subject},
                            {"slice", s.slice_id},
                            {"organ", o.organ},
                            {"prompt", curation::build_prompt(cfg.curation.template_id, o.organ, vp, meta)},
                            {"image_ref", (base / "image.png").generic_string()},
                            {"mask_ref", (base / o.mask_file).generic_string()}}
                           .dump()
                    << "\n";
                ++n;
            }
        }
    }
    std::printf("wrote %zu prompts -> %s\n", n, (cdir / "prompts.jsonl").string().c_str());
    return kOk;
}

std::shared_ptr<curation::GenerationClient> make_client(const RunConfig& cfg) {
    if (cfg.curation.client.kind == "mock") return std::make_shared<curation::MockClient>();
    if (cfg.curation.client.kind == "http") return std::make_shared<curation::HttpClient>(cfg.curation.client.http);
    throw ConfigError("curation.client.kind must be mock or http");
}

int cmd_curate_generate(const CommonOpts& common, bool append) {
    const auto cfg = resolve(common);
    const fs::path cdir = cfg.paths.curation_dir;
    std::vector<curation::GenerationJob> jobs;
    for (const auto& line : read_lines(cdir / "prompts.jsonl")) {
        const auto j = json::parse(line);
        jobs.push_back({j.at("subject"), j.at("slice"), j.at("organ"), j.at("prompt"), j.at("image_ref"),
                        j.value("mask_ref", "")});
    }
    if (!append) fs::remove(cdir / "status.jsonl");
    auto client = make_client(cfg);
    const auto results =
        curation::run_generation(*client, jobs, cfg.curation.client.http.concurrency, cfg.curation.max_retries);
    curation::write_outputs(cdir, results);
    std::size_t ok = 0, review = 0, failed = 0;
    for (const auto& r : results) {
        if (!r.outcome) ++failed;
        else if (r.outcome->review_required()) ++review;
        else ++ok;
    }
    std::printf("%zu generated, %zu need review, %zu transport failures -> %s\n", ok, review, failed,
                (cdir / "status.jsonl").string().c_str());
    return kOk;
}

int cmd_curate_serve(const CommonOpts& common, std::string host, int port) {
    const auto cfg = resolve(common);
    // Blocked in every thread (set before any is spawned); a dedicated thread receives them and stops the server.
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);
    const fs::path cdir = cfg.paths.curation_dir;
    fs::create_directories(cdir);
    auto under = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : cdir / p; };
    review::ReviewStore store(under(cfg.curation.review_db), under(cfg.curation.review_log));
    if (fs::exists(cdir / "status.jsonl"))
        std::printf("imported %d new items\n", store.import_status(cdir / "status.jsonl"));
    review::ServiceOptions so;
    so.asset_root = cfg.paths.data_root;
    so.max_retries = cfg.curation.max_retries;
    review::ReviewService service(store, make_client(cfg), so);
    review::HttpServer server(service);
    if (host.empty()) host = cfg.curation.host;
    if (port < 0) port = cfg.curation.port;

    std::thread waiter([&] {
        int sig = 0;
        sigwait(&set, &sig);
        server.stop();
    });
    std::printf("serving review API on http://%s:%d/api\n", host.c_str(), port);
    std::fflush(stdout);
    const bool ok = server.listen(host, port);
    if (!ok) {
        pthread_kill(waiter.native_handle(), SIGTERM);
        waiter.join();
        throw IoError("cannot bind " + host + ":" + std::to_string(port));
    }
    waiter.join();
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multimodal CT reasoning toolkit: synthetic data, training, evaluation, inference and curation"};
    app.require_subcommand(1);

    CommonOpts common;
    std::string out, data_dir, run_dir, ckpt, split = "test", task = "both", image, query, host;
    bool closer = false, append = false;
    std::size_t max_objects = 0;
    int port = -1;

    auto* synth = app.add_subcommand("synth", "Generate the synthetic dataset and subject splits");
    add_common(synth, common);
    synth->add_option("--out", out, "Output directory (default paths.data_root)");

    auto* train = app.add_subcommand("train", "Train reasoner and perceiver end to end");
    add_common(train, common);
    train->add_option("--data", data_dir, "Dataset root (default paths.data_root)");
    train->add_option("--run-dir", run_dir, "Run directory (default paths.run_dir)");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
    add_common(eval, common);
    eval->add_option("--checkpoint", ckpt, "Checkpoint (default <run_dir>/best.ckpt)");
    eval->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
    eval->add_option("--task", task, "seg, det or both")->check(CLI::IsMember({"seg", "det", "both"}));
    eval->add_flag("--closer", closer, "Run the closer-look round and report paired statistics");
    eval->add_option("--max-objects", max_objects, "Evaluate at most this many objects (0 = all)");
    int workers = 0;
    eval->add_option("--workers", workers, "Objects inferred concurrently (default infer.workers)");
    eval->add_option("--data", data_dir, "Dataset root (default from the checkpoint config)");
    eval->add_option("--out", out, "Output directory for eval.json / eval.txt");

    auto* inf = app.add_subcommand("infer", "Answer one query about one image");
    add_common(inf, common);
    inf->add_option("--checkpoint", ckpt, "Checkpoint")->required();
    inf->add_option("--image", image, "PNG slice (8- or 16-bit grayscale)")->required();
    inf->add_option("--query", query, "Question text")->required();
    inf->add_flag("--closer", closer, "Run the closer-look round");
    inf->add_option("--out", out, "Output directory (default infer_out)");

    auto* curate = app.add_subcommand("curate", "Dataset curation pipeline");
    curate->require_subcommand(1);
    auto* filter = curate->add_subcommand("filter", "Volume-wise slice filtering -> retained.json");
    add_common(filter, common);
    auto* prompts = curate->add_subcommand("prompts", "Visual prompts and structured prompts -> prompts.jsonl");
    add_common(prompts, common);
    auto* generate = curate->add_subcommand("generate", "Appearance descriptions via the configured client");
    add_common(generate, common);
    generate->add_flag("--append", append, "Append to an existing status.jsonl instead of replacing it");
    auto* serve = curate->add_subcommand("serve", "Run the review service HTTP API");
    add_common(serve, common);
    serve->add_option("--host", host, "Bind address (default curation.host)");
    serve->add_option("--port", port, "Port (default curation.port)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*synth) return cmd_synth(common, out);
        if (*train) return cmd_train(common, data_dir, run_dir);
        if (*eval) return cmd_eval(common, ckpt, split, task, closer, max_objects, workers, out, data_dir);
        if (*inf) return cmd_infer(common, ckpt, image, query, closer, out);
        if (*filter) return cmd_curate_filter(common);
        if (*prompts) return cmd_curate_prompts(common);
        if (*generate) return cmd_curate_generate(common, append);
        if (*serve) return cmd_curate_serve(common, host, port);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfig;
    } catch (const UnknownTokenError& e) {
        std::fprintf(stderr, "input error: %s\n", e.what());
        return kConfig;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return kNumeric;
    } catch (const IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const json::exception& e) {
        std::fprintf(stderr, "malformed JSON: %s\n", e.what());
        return kIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kOther;
    }
    return kOther;
}
