#include <doctest.h>

#include "ctreason/engine/roi.hpp"
#include "ctreason/errors.hpp"
#include "ctreason/metrics.hpp"
#include "ctreason/tokenizer.hpp"
#include "support.hpp"

using namespace ctreason;
using namespace ctreason::engine;
using testsupport::random_blob;
using testsupport::rect_mask;

namespace {

double fraction(const Mask& m) { return static_cast<double>(foreground_count(m)) / static_cast<double>(m.size()); }

}  // namespace

TEST_CASE("full-foreground mask with no margin covers the image") {
    const Mask m(64, 64, 1);
    CHECK(build_roi(m, {0.0, true}) == PixelRegion{0, 0, 63, 63});
}

TEST_CASE("single pixel with no margin is a degenerate rectangle") {
    Mask m(64, 64);
    m(10, 20) = 1;
    CHECK(build_roi(m, {0.0, false}) == PixelRegion{20, 10, 20, 10});
}

TEST_CASE("blob geometry matches the hand computation") {
    // Rows 8-15 (8 tall), cols 4-19 (16 wide). Margins ceil(0.8) = 1 row, ceil(1.6) = 2 cols
    // -> rows 7-16, cols 2-21 (10 x 20). Squaring adds 10 rows, 5 above and 5 below.
    const auto m = rect_mask(64, 64, 8, 4, 15, 19);
    CHECK(build_roi(m, {0.1, false}) == PixelRegion{2, 7, 21, 16});
    CHECK(build_roi(m, {0.1, true}) == PixelRegion{2, 2, 21, 21});
}

TEST_CASE("squaring shifts inward at the border") {
    const auto m = rect_mask(64, 64, 0, 10, 1, 29);  // 2 x 20 touching the top edge
    const auto r = build_roi(m, {0.0, true});
    CHECK(r.height() == 20);
    CHECK(r.width() == 20);
    CHECK(r.y_min == 0);
}

TEST_CASE("empty mask is refused") { CHECK_THROWS_AS(build_roi(Mask(16, 16)), EmptyMaskError); }

TEST_CASE("roi always contains the mask and stays inside the image") {
    Rng rng(23);
    for (int i = 0; i < 300; ++i) {
        const auto m = random_blob(rng, 64, 64, 1.0, 20);
        const auto tight = metrics::tight_region(m);
        const auto r = build_roi(m, {rng.uniform(0, 0.3), true});
        REQUIRE(r.x_min <= tight.x_min);
        REQUIRE(r.y_min <= tight.y_min);
        REQUIRE(r.x_max >= tight.x_max);
        REQUIRE(r.y_max >= tight.y_max);
        REQUIRE(r.x_min >= 0);
        REQUIRE(r.y_min >= 0);
        REQUIRE(r.x_max < 64);
        REQUIRE(r.y_max < 64);
        REQUIRE(r.width() == r.height());
    }
}

TEST_CASE("whole-slice crop reproduces the slice") {
    Rng rng(2);
    ImageGrid img(64, 64);
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    const Mask full(64, 64, 1);
    const auto c = crop(img, &full, build_roi(full, {0.0, true}), 64, 64);
    for (std::size_t i = 0; i < img.data.size(); ++i) REQUIRE(c.image.data[i] == doctest::Approx(img.data[i]));
    CHECK(c.mask == full);
    CHECK(paste_back(c.mask, c.region, 64, 64) == full);
}

TEST_CASE("resized GT mask is never sparser than the original (200 blobs)") {
    Rng rng(41);
    ImageGrid img(64, 64, 0.5f);
    for (int i = 0; i < 200; ++i) {
        const auto m = random_blob(rng, 64, 64, 1.5, 14);
        const auto c = crop(img, &m, build_roi(m, {0.1, true}), 64, 64);
        REQUIRE(fraction(c.mask) >= fraction(m));
    }
}

TEST_CASE("crop then paste back preserves blobs (100 blobs, Dice >= 0.9)") {
    Rng rng(43);
    ImageGrid img(64, 64, 0.5f);
    double worst = 1;
    for (int i = 0; i < 100; ++i) {
        const auto m = random_blob(rng, 64, 64, 2.0, 14);
        const auto region = build_roi(m, {0.1, true});
        const auto c = crop(img, &m, region, 64, 64);
        const auto back = paste_back(c.mask, region, 64, 64);
        worst = std::min(worst, metrics::dice_score(m, back));
        // Pasted foreground stays inside the region.
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                if (back(y, x)) REQUIRE((y >= region.y_min && y <= region.y_max && x >= region.x_min && x <= region.x_max));
    }
    CHECK(worst >= 0.9);
}

TEST_CASE("round-2 training pair uses the GT mask region and has one [closer]") {
    data::MultimodalSample s;
    s.image = ImageGrid(64, 64, 0.3f);
    data::ObjectAnnotation o;
    o.organ = "spleen";
    o.mask = rect_mask(64, 64, 20, 30, 27, 37);
    s.objects.push_back(o);
    const auto r2 = make_round2_sample(s, 0, {0.1, true}, 7);
    CHECK(r2.crop.region == build_roi(o.mask, {0.1, true}));
    const auto toks = tokenizer::split_tokens(r2.answer);
    CHECK(std::count(toks.begin(), toks.end(), "[closer]") == 1);
    CHECK(r2.query.find("spleen") != std::string::npos);
    CHECK(make_round2_sample(s, 0, {0.1, true}, 7).query == r2.query);
}
