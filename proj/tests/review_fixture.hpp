#pragma once

#include <memory>

#include "ctreason/curation.hpp"
#include "ctreason/image.hpp"
#include "ctreason/review.hpp"
#include "support.hpp"

namespace testsupport {

/// A store populated from mock-generated descriptions, with slice and mask assets on disk.
struct ReviewFixture {
    TempDir dir;
    std::unique_ptr<ctreason::review::ReviewStore> store;
    std::shared_ptr<ctreason::curation::GenerationClient> client;
    std::vector<std::int64_t> ids;

    explicit ReviewFixture(int items, std::shared_ptr<ctreason::curation::GenerationClient> c = nullptr)
        : dir("review"), client(c ? std::move(c) : std::make_shared<ctreason::curation::MockClient>()) {
        using namespace ctreason;
        store = std::make_unique<review::ReviewStore>(dir.path() / "review.sqlite", dir.path() / "events.jsonl");
        Grid<std::uint16_t> raw(32, 32);
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) raw(y, x) = static_cast<std::uint16_t>(200 + 20 * ((x + y) % 7));
        png::write_file(dir.path() / "image.png", png::encode_gray16(raw));
        auto m = rect_mask(32, 32, 8, 10, 17, 21);
        for (auto& v : m.data) v = v ? 255 : 0;
        png::write_file(dir.path() / "mask.png", png::encode_gray8(m));
        curation::MockClient mock;
        for (int i = 0; i < items; ++i) {
            review::NewItem it;
            it.subject = "subj_" + std::to_string(100 + i / 10);
            it.slice = "slice_" + std::to_string(100 + i % 10);
            it.organ = i % 2 ? "liver" : "spleen";
            it.prompt = curation::build_prompt("appearance_v1", it.organ,
                                               curation::derive_visual_prompts(rect_mask(32, 32, 8, 10, 17, 21)),
                                               {it.subject, it.slice, 32, 32});
            it.raw_output = mock.generate(it.prompt, "image.png");
            it.description = curation::AppearanceDescription::from_json(it.raw_output);
            it.image_ref = "image.png";
            it.mask_ref = "mask.png";
            ids.push_back(store->add(it));
        }
    }

    ctreason::review::ServiceOptions options(bool worker = false) const {
        ctreason::review::ServiceOptions o;
        o.asset_root = dir.path();
        o.start_worker = worker;
        return o;
    }
};

}  // namespace testsupport
