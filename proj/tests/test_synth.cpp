#include <doctest.h>

#include <fstream>
#include <set>

#include "ctreason/curation.hpp"
#include "ctreason/data.hpp"
#include "ctreason/errors.hpp"
#include "ctreason/image.hpp"
#include "ctreason/metrics.hpp"
#include "ctreason/synth.hpp"
#include "ctreason/tokenizer.hpp"
#include "support.hpp"

using namespace ctreason;
namespace fs = std::filesystem;

namespace {

synth::SynthConfig small_config(std::uint64_t seed) {
    synth::SynthConfig c;
    c.subjects = 4;
    c.slices = 6;
    c.seed = seed;
    return c;
}

std::map<std::string, std::string> read_tree(const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file()) {
            std::ifstream in(e.path(), std::ios::binary);
            files[fs::relative(e.path(), root).generic_string()] = {std::istreambuf_iterator<char>(in), {}};
        }
    return files;
}

}  // namespace

TEST_CASE("fixed seed gives a byte-identical dataset") {
    testsupport::TempDir a("synth_a"), b("synth_b");
    synth::write(a.path(), synth::generate(small_config(5)));
    synth::write(b.path(), synth::generate(small_config(5)));
    const auto ta = read_tree(a.path()), tb = read_tree(b.path());
    CHECK(ta.size() > 10);
    CHECK(ta == tb);

    testsupport::TempDir c("synth_c");
    synth::write(c.path(), synth::generate(small_config(6)));
    CHECK(read_tree(c.path()) != ta);
}

TEST_CASE("generator contracts") {
    const auto ds = synth::generate(small_config(9));
    std::size_t det_objects = 0, kidney_pairs = 0;
    for (const auto& subj : ds.subjects)
        for (const auto& s : subj.slices) {
            CHECK_NOTHROW(data::validate(s));
            for (const auto& o : s.objects) {
                CHECK(o.task == data::task_from_answer(o.answer));
                if (data::wants_det(o.task)) {
                    ++det_objects;
                    CHECK(!o.boxes.empty());
                }
                // Instance boxes tile the visual-prompt box of the union mask.
                const auto vp = curation::derive_visual_prompts(o.mask);
                PixelRegion u = o.boxes.front();
                for (const auto& b : o.boxes) {
                    u.x_min = std::min(u.x_min, b.x_min);
                    u.y_min = std::min(u.y_min, b.y_min);
                    u.x_max = std::max(u.x_max, b.x_max);
                    u.y_max = std::max(u.y_max, b.y_max);
                }
                CHECK(u == vp.bbox);
                if (o.boxes.size() == 1) CHECK(o.boxes[0] == vp.bbox);
                if (o.organ == "kidney" && o.boxes.size() == 2) ++kidney_pairs;
            }
        }
    CHECK(det_objects > 0);
    CHECK(kidney_pairs > 0);
}

TEST_CASE("splits are subject-level and disjoint") {
    const auto ds = synth::generate(small_config(3));
    std::set<std::string> seen;
    std::size_t total = 0;
    for (const auto& [name, ids] : ds.splits) {
        total += ids.size();
        for (const auto& id : ids) CHECK(seen.insert(id).second);
    }
    CHECK(total == ds.subjects.size());
}

TEST_CASE("on-disk round trip reproduces samples") {
    const auto ds = synth::generate(small_config(4));
    testsupport::TempDir dir("synth_rt");
    synth::write(dir.path(), ds);
    const auto& subj = ds.subjects.front();
    const auto loaded = data::load_subject(dir.path(), subj.id);
    REQUIRE(loaded.size() == subj.slices.size());
    for (std::size_t i = 0; i < loaded.size(); ++i) {
        CHECK(loaded[i].raw == subj.slices[i].raw);
        CHECK(loaded[i].image == subj.slices[i].image);
        REQUIRE(loaded[i].objects.size() == subj.slices[i].objects.size());
        for (std::size_t k = 0; k < loaded[i].objects.size(); ++k) {
            const auto& a = loaded[i].objects[k];
            const auto& b = subj.slices[i].objects[k];
            CHECK(a.mask == b.mask);
            CHECK(a.boxes == b.boxes);
            CHECK(a.query == b.query);
            CHECK(a.answer == b.answer);
        }
    }
    CHECK(data::read_split(dir.path(), "train") == ds.splits.at("train"));
}

TEST_CASE("profiles") {
    auto small = small_config(1);
    small.profile = "small";
    auto frag = small_config(1);
    frag.profile = "fragmented";
    const auto std_ds = synth::generate(small_config(1));
    const auto small_ds = synth::generate(synth::apply_profile(small));
    const auto frag_ds = synth::generate(synth::apply_profile(frag));

    auto mean_area = [](const synth::Dataset& ds) {
        double a = 0;
        std::size_t n = 0;
        for (const auto& subj : ds.subjects)
            for (const auto& s : subj.slices)
                for (const auto& o : s.objects) {
                    a += static_cast<double>(foreground_count(o.mask));
                    ++n;
                }
        return n ? a / static_cast<double>(n) : 0.0;
    };
    CHECK(mean_area(small_ds) < 0.6 * mean_area(std_ds));

    std::size_t multi_component = 0;
    for (const auto& subj : frag_ds.subjects)
        for (const auto& s : subj.slices)
            for (const auto& o : s.objects) {
                CHECK(o.organ == "pancreas");
                int parts = 0;
                metrics::label_components(o.mask, metrics::Connectivity::eight, &parts);
                // One GT box spans all fragments.
                CHECK(o.boxes.size() == 1);
                multi_component += parts > 1;
            }
    CHECK(multi_component > 0);
}

TEST_CASE("invalid synthesis settings are config errors") {
    auto c = small_config(1);
    c.fragments_min = 0;
    CHECK_THROWS_AS(synth::generate(c), ConfigError);
    auto p = small_config(1);
    p.profile = "enormous";
    CHECK_THROWS_AS(synth::apply_profile(p), ConfigError);
}
