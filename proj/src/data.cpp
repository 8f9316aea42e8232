#include "ctreason/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ctreason/errors.hpp"

namespace ctreason::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::string task_name(Task t) {
    switch (t) {
        case Task::seg: return "seg";
        case Task::det: return "det";
        case Task::both: return "both";
    }
    return "?";
}

bool wants_seg(Task t) { return t == Task::seg || t == Task::both; }
bool wants_det(Task t) { return t == Task::det || t == Task::both; }

Task task_from_answer(const std::string& answer) {
    const bool seg = answer.find("[seg]") != std::string::npos;
    const bool det = answer.find("[det]") != std::string::npos;
    if (seg && det) return Task::both;
    if (det) return Task::det;
    if (seg) return Task::seg;
    throw ConfigError("answer carries no routing token: '" + answer + "'");
}

void validate(const MultimodalSample& s) {
    for (const auto& o : s.objects) {
        if (o.mask.height != s.image.height || o.mask.width != s.image.width)
            throw ShapeError("mask of '" + o.organ + "' does not match slice shape");
        if (task_from_answer(o.answer) != o.task)
            throw ConfigError("answer routing tokens disagree with task for '" + o.organ + "'");
        if (wants_det(o.task) && o.boxes.empty()) throw ConfigError("[det] object '" + o.organ + "' has no boxes");
    }
}

void save_sample(const fs::path& root, const MultimodalSample& s) {
    const auto dir = root / s.subject / s.slice_id;
    fs::create_directories(dir);
    png::write_file(dir / "image.png", png::encode_gray16(s.raw));
    json objects = json::array();
    for (const auto& o : s.objects) {
        const std::string mask_file = o.mask_file.empty() ? "mask_" + o.organ + ".png" : o.mask_file;
        Grid<std::uint8_t> label(o.mask.height, o.mask.width);
        for (std::size_t i = 0; i < label.data.size(); ++i) label.data[i] = o.mask.data[i] ? 255 : 0;
        png::write_file(dir / mask_file, png::encode_gray8(label));
        json boxes = json::array();
        for (const auto& b : o.boxes) boxes.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
        objects.push_back({{"organ", o.organ},
                           {"query", o.query},
                           {"answer", o.answer},
                           {"boxes", boxes},
                           {"mask_file", mask_file}});
    }
    nlohmann::ordered_json j;
    j["subject"] = s.subject;
    j["slice"] = s.slice_id;
    j["index"] = s.slice_index;
    j["image"] = "image.png";
    j["objects"] = objects;
    std::ofstream out(dir / "sample.json");
    if (!out) throw IoError("cannot write " + (dir / "sample.json").string());
    out << j.dump(2) << "\n";
}

MultimodalSample load_sample(const fs::path& slice_dir) {
    std::ifstream in(slice_dir / "sample.json");
    if (!in) throw IoError("cannot open " + (slice_dir / "sample.json").string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw IoError("malformed " + (slice_dir / "sample.json").string() + ": " + e.what());
    }
    MultimodalSample s;
    s.subject = j.value("subject", slice_dir.parent_path().filename().string());
    s.slice_id = j.value("slice", slice_dir.filename().string());
    s.slice_index = j.value("index", 0);
    s.raw = png::read_gray16(slice_dir / j.value("image", std::string("image.png")));
    s.image = window_minmax(s.raw);
    for (const auto& o : j.at("objects")) {
        ObjectAnnotation a;
        a.organ = o.at("organ").get<std::string>();
        a.query = o.at("query").get<std::string>();
        a.answer = o.at("answer").get<std::string>();
        a.mask_file = o.at("mask_file").get<std::string>();
        a.mask = png::read_mask8(slice_dir / a.mask_file);
        for (const auto& b : o.at("boxes")) a.boxes.push_back({b.at(0), b.at(1), b.at(2), b.at(3)});
        a.task = task_from_answer(a.answer);
        s.objects.push_back(std::move(a));
    }
    validate(s);
    return s;
}

std::vector<MultimodalSample> load_subject(const fs::path& root, const std::string& subject) {
    std::vector<MultimodalSample> out;
    const auto dir = root / subject;
    if (!fs::is_directory(dir)) throw IoError("missing subject directory " + dir.string());
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory() && fs::exists(entry.path() / "sample.json")) out.push_back(load_sample(entry.path()));
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.slice_index < b.slice_index; });
    return out;
}

void write_split(const fs::path& root, const std::string& split, const std::vector<std::string>& subjects) {
    fs::create_directories(root);
    std::ofstream out(root / (split + ".txt"));
    if (!out) throw IoError("cannot write split " + split);
    for (const auto& s : subjects) out << s << "\n";
}

std::vector<std::string> read_split(const fs::path& root, const std::string& split) {
    std::ifstream in(root / (split + ".txt"));
    if (!in) throw IoError("missing split manifest " + (root / (split + ".txt")).string());
    std::vector<std::string> out;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(line);
    return out;
}

std::vector<MultimodalSample> load_split(const fs::path& root, const std::string& split) {
    std::vector<MultimodalSample> out;
    for (const auto& subject : read_split(root, split)) {
        auto slices = load_subject(root, subject);
        for (auto& s : slices)
            if (!s.objects.empty()) out.push_back(std::move(s));
    }
    return out;
}

}  // namespace ctreason::data
