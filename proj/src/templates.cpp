#include "ctreason/templates.hpp"

namespace ctreason::templates {

const std::vector<std::string>& organ_names() {
    static const std::vector<std::string> names = {"liver", "spleen", "kidney", "aorta", "gallbladder", "pancreas"};
    return names;
}

const std::vector<std::string>& round1_queries(data::Task task) {
    static const std::vector<std::string> seg = {
        "please segment the {organ}",
        "can you segment the {organ} in this slice",
        "show the mask of the {organ}",
    };
    static const std::vector<std::string> det = {
        "please detect the {organ}",
        "can you locate the {organ} with a box",
        "where is the {organ} ? give a bounding box",
    };
    static const std::vector<std::string> both = {
        "please segment and detect the {organ}",
        "can you segment the {organ} and draw its box",
        "show the mask and the box of the {organ}",
    };
    switch (task) {
        case data::Task::seg: return seg;
        case data::Task::det: return det;
        case data::Task::both: return both;
    }
    return seg;
}

const std::vector<std::string>& round2_queries() {
    static const std::vector<std::string> q = {
        "can you have a closer look at the {organ}",
        "please take a closer look at the {organ}",
        "look closer at the {organ} and refine it",
    };
    return q;
}

std::string fill(const std::string& pattern, const std::string& organ) {
    static const std::string key = "{organ}";
    std::string out = pattern;
    for (auto pos = out.find(key); pos != std::string::npos; pos = out.find(key, pos + organ.size()))
        out.replace(pos, key.size(), organ);
    return out;
}

std::string round1_answer(const std::string& organ, const curation::GeometryWords& g, data::Task task) {
    std::string out = curation::summary_sentence(organ, g);
    switch (task) {
        case data::Task::seg: return out + " [seg]";
        case data::Task::det: return out + " [det]";
        case data::Task::both: return out + " [seg] [det]";
    }
    return out;
}

std::string round2_answer(const std::string& organ) { return "here is a closer look at the " + organ + " [closer]"; }

std::size_t pick(std::uint64_t seed, std::size_t n) {
    // splitmix64 finaliser; std distributions are not portable across standard libraries.
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return static_cast<std::size_t>(z % n);
}

std::vector<std::string> corpus_inventory() {
    std::vector<std::string> corpus;
    const curation::GeometryWords all_words[] = {
        {"tiny", "round", "upper left"},   {"small", "oval", "upper central"}, {"medium", "elongated", "upper right"},
        {"large", "round", "middle left"}, {"large", "round", "middle central"}, {"large", "round", "middle right"},
        {"large", "round", "lower left"},  {"large", "round", "lower central"}, {"large", "round", "lower right"},
    };
    for (const auto& organ : organ_names()) {
        for (auto task : {data::Task::seg, data::Task::det, data::Task::both}) {
            for (const auto& q : round1_queries(task)) corpus.push_back(fill(q, organ));
            for (const auto& g : all_words) corpus.push_back(round1_answer(organ, g, task));
        }
        for (const auto& q : round2_queries()) corpus.push_back(fill(q, organ));
        corpus.push_back(round2_answer(organ));
    }
    return corpus;
}

}  // namespace ctreason::templates
