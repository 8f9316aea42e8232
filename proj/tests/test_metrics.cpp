#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "ctreason/errors.hpp"
#include "ctreason/metrics.hpp"
#include "support.hpp"

using namespace ctreason;
using namespace ctreason::metrics;
using testsupport::rect_mask;

TEST_CASE("dice closed forms") {
    const auto a = rect_mask(8, 8, 1, 1, 3, 3);
    CHECK(dice_score(a, a) == 1.0);
    CHECK(dice_score(a, rect_mask(8, 8, 5, 5, 6, 6)) == 0.0);
    CHECK(dice_score(Mask(8, 8), Mask(8, 8)) == 1.0);
    Mask p(4, 4), g(4, 4);
    p(0, 0) = p(0, 1) = p(0, 2) = 1;
    g(0, 1) = g(0, 2) = g(1, 0) = g(1, 1) = g(1, 2) = 1;
    CHECK(dice_score(p, g) == 0.5);
    CHECK_THROWS_AS(dice_score(Mask(4, 4), Mask(4, 5)), ShapeError);
}

TEST_CASE("hd95 closed forms") {
    const auto a = rect_mask(16, 16, 2, 2, 6, 6);
    CHECK(hd95(a, a) == 0.0);
    Mask p(16, 16), g(16, 16);
    p(3, 2) = 1;
    g(3, 7) = 1;
    CHECK(hd95(p, g) == doctest::Approx(5.0).epsilon(1e-12));
    CHECK(hd95(Mask(16, 16), Mask(16, 16)) == 0.0);
    CHECK(hd95(p, Mask(16, 16)) == hd95_sentinel(16, 16));
    CHECK(hd95_sentinel(16, 16) == doctest::Approx(std::sqrt(2.0) * 16));
    // Anisotropic spacing scales the row offset.
    Mask r(16, 16), s(16, 16);
    r(2, 4) = 1;
    s(6, 4) = 1;
    CHECK(hd95(r, s, {2.5, 1.0}) == doctest::Approx(10.0));
}

TEST_CASE("percentile interpolates linearly") {
    CHECK(percentile({1, 2, 3, 4}, 50) == doctest::Approx(2.5));
    CHECK(percentile({3, 1, 2}, 100) == 3);
    CHECK(percentile({3, 1, 2}, 0) == 1);
    CHECK(percentile({0, 10}, 95) == doctest::Approx(9.5));
}

TEST_CASE("surface pixels of a filled rectangle are its outline") {
    const auto m = rect_mask(10, 10, 2, 2, 5, 6);
    const auto s = surface_pixels(m);
    CHECK(s.size() == 2 * 4 + 2 * 5 - 4);
}

TEST_CASE("map closed forms") {
    const std::vector<std::vector<Box>> gts = {{{0.1, 0.1, 0.3, 0.3}, {0.6, 0.6, 0.9, 0.9}}};
    SUBCASE("perfect predictions") {
        CHECK(map_at({{{gts[0][0], 1.0}, {gts[0][1], 1.0}}}, gts) == 1.0);
    }
    SUBCASE("no predictions") { CHECK(map_at({{}}, gts) == 0.0); }
    SUBCASE("two hits around a mid-score false positive") {
        // Ranks: hit, miss, hit -> PR points (0.5, 1), (0.5, 0.5), (1, 2/3); envelope area 0.5 + 0.5 * 2/3.
        const std::vector<std::vector<BoxHypothesis>> preds = {
            {{gts[0][0], 0.9}, {{0.4, 0.0, 0.5, 0.05}, 0.6}, {gts[0][1], 0.3}}};
        CHECK(map_at(preds, gts) == doctest::Approx(0.5 + 0.5 * 2.0 / 3.0).epsilon(1e-12));
    }
    SUBCASE("no ground truth") {
        CHECK(map_at({{}}, {{}}) == 1.0);
        CHECK(map_at({{{{0, 0, 1, 1}, 0.5}}}, {{}}) == 0.0);
    }
    SUBCASE("duplicate detections count once") {
        const std::vector<std::vector<BoxHypothesis>> preds = {{{gts[0][0], 0.9}, {gts[0][0], 0.8}}};
        // Hit then duplicate: PR (0.5, 1), (0.5, 0.5) -> AP 0.5.
        CHECK(map_at(preds, gts) == doctest::Approx(0.5));
    }
}

TEST_CASE("mask_to_boxes confidence modes") {
    ProbGrid prob(20, 20, 0.0f);
    SUBCASE("single blob") {
        for (int y = 2; y < 5; ++y)
            for (int x = 2; x < 6; ++x) prob(y, x) = 0.8f;
        const auto b = mask_to_boxes(prob, 0.5, BoxConfidence::area);
        REQUIRE(b.size() == 1);
        CHECK(b[0].score == 1.0);
        CHECK(b[0].box == normalize({2, 2, 5, 4}, 20, 20));
    }
    SUBCASE("two blobs by area and by max probability") {
        for (int y = 0; y < 5; ++y)
            for (int x = 0; x < 6; ++x) prob(y, x) = 0.9f;  // 30 pixels
        for (int y = 10; y < 12; ++y)
            for (int x = 10; x < 15; ++x) prob(y, x) = 0.6f;  // 10 pixels
        auto area = mask_to_boxes(prob, 0.5, BoxConfidence::area);
        REQUIRE(area.size() == 2);
        CHECK(area[0].score == doctest::Approx(0.75));
        CHECK(area[1].score == doctest::Approx(0.25));
        auto mp = mask_to_boxes(prob, 0.5, BoxConfidence::maxprob);
        REQUIRE(mp.size() == 2);
        CHECK(mp[0].score == doctest::Approx(0.9));
        CHECK(mp[1].score == doctest::Approx(0.6));
    }
    SUBCASE("diagonal neighbours split under 4-connectivity only") {
        prob(3, 3) = prob(4, 4) = 1.0f;
        CHECK(mask_to_boxes(prob, 0.5, BoxConfidence::area, Connectivity::four).size() == 2);
        CHECK(mask_to_boxes(prob, 0.5, BoxConfidence::area, Connectivity::eight).size() == 1);
    }
}

TEST_CASE("tight_region") {
    CHECK(tight_region(rect_mask(10, 10, 2, 3, 4, 7)) == PixelRegion{3, 2, 7, 4});
    CHECK_THROWS_AS(tight_region(Mask(4, 4)), EmptyMaskError);
}

TEST_CASE("report builder averages per class and the table lists every organ") {
    ReportBuilder b;
    b.add_dice("liver", 0.8);
    b.add_dice("liver", 0.6);
    b.add_dice("spleen", 0.3);
    b.add_hd95("liver", 2);
    b.add_detection("kidney", {{{0, 0, 0.5, 0.5}, 0.9}}, {{0, 0, 0.5, 0.5}});
    const auto r = b.build();
    CHECK(r.per_class_dice.at("liver") == doctest::Approx(0.7));
    CHECK(r.mean_dice == doctest::Approx(0.5));
    CHECK(r.per_class_map.at("kidney") == 1.0);
    const auto t = r.to_table();
    CHECK(t.find("liver") != std::string::npos);
    CHECK(t.find("kidney") != std::string::npos);
    CHECK(r.to_json().find("mean_dice") != std::string::npos);
}
