#include "doctest_torch.hpp"

#include <cmath>

#include "ctreason/errors.hpp"
#include "ctreason/objectives/losses.hpp"
#include "ctreason/rng.hpp"
#include "gradcheck.hpp"

using namespace ctreason;
using namespace ctreason::objectives;
using testsupport::gradient_rel_error;

namespace {

const auto f64 = torch::TensorOptions().dtype(torch::kFloat64);

LossWeights weights() { return LossWeights{}; }

torch::Tensor random_boxes(Rng& rng, int n) {
    auto t = torch::empty({n, 4}, f64);
    auto* p = t.data_ptr<double>();
    for (int i = 0; i < n; ++i) {
        const double x0 = rng.uniform(0, 0.7), y0 = rng.uniform(0, 0.7);
        p[4 * i] = x0;
        p[4 * i + 1] = y0;
        p[4 * i + 2] = x0 + rng.uniform(0.05, 0.3);
        p[4 * i + 3] = y0 + rng.uniform(0.05, 0.3);
    }
    return t;
}

}  // namespace

TEST_CASE("language loss closed forms") {
    const int v = 7;
    SUBCASE("uniform logits give ln V") {
        const auto logits = torch::zeros({2, 3, v}, f64);
        const auto targets = torch::tensor({{1, 2, 3}, {4, 5, 6}}, torch::kInt64);
        const auto mask = torch::ones({2, 3}, torch::kInt64);
        CHECK(language_loss(logits, targets, mask, 2).item<double>() == doctest::Approx(std::log(v)).epsilon(1e-12));
    }
    SUBCASE("saturated logits approach zero") {
        auto logits = torch::zeros({1, 4, v}, f64);
        const auto targets = torch::tensor({{0, 3, 2, 6}}, torch::kInt64);
        for (int t = 0; t < 4; ++t) logits[0][t][targets[0][t].item<std::int64_t>()] = 40.0;
        CHECK(language_loss(logits, targets, torch::ones({1, 4}), 1).item<double>() < 1e-3);
    }
    SUBCASE("masked two-row batch against a hand computation") {
        Rng rng(5);
        auto logits = torch::empty({2, 3, 4}, f64);
        for (int i = 0; i < 24; ++i) logits.view({-1})[i] = rng.uniform(-2, 2);
        const std::vector<std::vector<int>> tgt = {{1, 0, 3}, {2, 2, 1}};
        const std::vector<std::vector<int>> msk = {{1, 1, 0}, {0, 1, 1}};
        double want = 0;
        for (int r = 0; r < 2; ++r) {
            double row = 0;
            int count = 0;
            for (int t = 0; t < 3; ++t) {
                if (!msk[r][t]) continue;
                double z = 0;
                for (int k = 0; k < 4; ++k) z += std::exp(logits[r][t][k].item<double>());
                row += std::log(z) - logits[r][t][tgt[r][t]].item<double>();
                ++count;
            }
            want += row / count;
        }
        want /= 1.5;
        const auto got = language_loss(logits, torch::tensor({{1, 0, 3}, {2, 2, 1}}, torch::kInt64),
                                       torch::tensor({{1, 1, 0}, {0, 1, 1}}), 1.5);
        CHECK(got.item<double>() == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("shape and mask errors") {
        CHECK_THROWS_AS(language_loss(torch::zeros({2, 3, v}), torch::zeros({2, 4}, torch::kInt64),
                                      torch::ones({2, 4}), 1),
                        ShapeError);
        CHECK_THROWS_AS(language_loss(torch::zeros({1, 2, v}), torch::zeros({1, 2}, torch::kInt64),
                                      torch::zeros({1, 2}), 1),
                        ShapeError);
    }
}

TEST_CASE("dice and segmentation losses") {
    const auto p = torch::tensor({1.0, 1.0, 0.0, 0.0}, f64).view({1, 2, 2});
    const auto g = torch::tensor({1.0, 0.0, 1.0, 0.0}, f64).view({1, 2, 2});
    CHECK(dice_loss(p, g).item<double>() == doctest::Approx(1 - (2 + kDiceEps) / (4 + kDiceEps)));
    CHECK(dice_loss(g, g).item<double>() == doctest::Approx(0).epsilon(1e-9));
    CHECK(dice_loss(g, 1 - g).item<double>() == doctest::Approx(1).epsilon(1e-6));

    Rng rng(9);
    auto prob = torch::empty({3, 5, 5}, f64), gt = torch::empty({3, 5, 5}, f64);
    for (int i = 0; i < 75; ++i) {
        prob.view({-1})[i] = rng.uniform(0.05, 0.95);
        gt.view({-1})[i] = rng.uniform() < 0.4 ? 1.0 : 0.0;
    }
    auto w = weights();
    w.w_bce = 0;
    CHECK(seg_loss(prob, gt, w, 2).item<double>() == doctest::Approx(dice_loss(prob, gt).sum().item<double>() / 4));
    w = weights();
    const auto logits = torch::log(prob / (1 - prob));
    CHECK(seg_loss_logits(logits, gt, w, 2).item<double>() ==
          doctest::Approx(seg_loss(prob, gt, w, 2).item<double>()).epsilon(1e-10));
    // Perfect prediction: BCE and Dice both vanish.
    CHECK(seg_loss(gt, gt, w, 3).item<double>() == doctest::Approx(0).epsilon(1e-6));
    CHECK_THROWS_AS(seg_loss(prob, gt.index({torch::indexing::Slice(0, 2)}), w, 1), ShapeError);
}

TEST_CASE("detection loss") {
    const auto w = weights();
    SUBCASE("perfect prediction") {
        const auto gt = torch::tensor({{0.1, 0.1, 0.3, 0.4}, {0.5, 0.5, 0.9, 0.8}}, f64);
        auto pred = torch::tensor({{0.0, 0.0, 0.2, 0.2}, {0.5, 0.5, 0.9, 0.8}, {0.7, 0.1, 0.9, 0.2},
                                   {0.1, 0.1, 0.3, 0.4}}, f64);
        const auto logits = torch::tensor({-30.0, 30.0, -30.0, 30.0}, f64);
        const auto r = detection_loss_logits(gt, pred, logits, w);
        CHECK(r.value.item<double>() < 1e-3);
        REQUIRE(r.match.pairs.size() == 2);
        CHECK(r.match.pairs[0] == std::pair<std::size_t, std::size_t>{0, 3});
        CHECK(r.match.pairs[1] == std::pair<std::size_t, std::size_t>{1, 1});
        CHECK(r.match.unmatched_preds == std::vector<std::size_t>{0, 2});
    }
    SUBCASE("no ground truth reduces to objectness against zeros") {
        const auto scores = torch::tensor({0.2, 0.7, 0.1}, f64);
        const auto r = detection_loss(torch::zeros({0, 4}, f64), torch::rand({3, 4}, f64), scores, w);
        const double want = -(std::log(0.8) + std::log(0.3) + std::log(0.9)) / 3;
        CHECK(r.value.item<double>() == doctest::Approx(want).epsilon(1e-12));
        CHECK(r.match.pairs.empty());
    }
    SUBCASE("one box, two queries") {
        const auto gt = torch::tensor({{0.1, 0.1, 0.5, 0.5}}, f64);
        const auto pred = torch::tensor({{0.6, 0.6, 0.9, 0.9}, {0.1, 0.1, 0.4, 0.5}}, f64);
        const auto scores = torch::tensor({0.3, 0.8}, f64);
        const auto r = detection_loss(gt, pred, scores, w);
        // Query 1 sits inside the box: IoU 0.75, enclosure equals the box, L1 0.1.
        const double want = 0.1 + (1 - 0.75) + -(std::log(0.7) + std::log(0.8)) / 2;
        CHECK(r.value.item<double>() == doctest::Approx(want).epsilon(1e-12));
        CHECK(r.match.pairs == std::vector<std::pair<std::size_t, std::size_t>>{{0, 1}});
    }
    SUBCASE("logit and probability forms agree") {
        Rng rng(3);
        const auto gt = random_boxes(rng, 2), pred = random_boxes(rng, 5);
        const auto logits = torch::tensor({0.3, -1.2, 2.0, 0.1, -0.4}, f64);
        CHECK(detection_loss_logits(gt, pred, logits, w).value.item<double>() ==
              doctest::Approx(detection_loss(gt, pred, torch::sigmoid(logits), w).value.item<double>()).epsilon(1e-10));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(detection_loss(torch::zeros({3, 4}), torch::zeros({2, 4}), torch::zeros({2}), w), ShapeError);
        CHECK_THROWS_AS(detection_loss(torch::zeros({1, 4}), torch::zeros({2, 3}), torch::zeros({2}), w), ShapeError);
        auto bad = torch::zeros({2, 4}, f64);
        bad[0][0] = std::nan("");
        CHECK_THROWS_AS(detection_loss(torch::zeros({1, 4}, f64), bad, torch::zeros({2}, f64), w), NumericError);
    }
}

TEST_CASE("total loss") {
    LossParts parts{torch::tensor(1.0, f64), torch::tensor(2.0, f64), torch::tensor(3.0, f64)};
    auto w = weights();
    CHECK(total_loss(parts, w).item<double>() == 6.0);
    w.lambda_det = 2.5;
    CHECK(total_loss(parts, w).item<double>() == doctest::Approx(1 + 2 + 7.5));
    w.lambda_det = 0;
    CHECK(total_loss(parts, w).item<double>() == 3.0);
    parts.det = torch::Tensor();
    w.lambda_det = 1;
    CHECK(total_loss(parts, w).item<double>() == 3.0);
}

TEST_CASE("tensor GIoU matches the scalar reference") {
    Rng rng(11);
    for (int i = 0; i < 500; ++i) {
        auto a = random_boxes(rng, 1), b = random_boxes(rng, 1);
        if (i % 50 == 0) b = a.clone();
        if (i % 50 == 1) a[0][2] = a[0][0];  // zero width
        const Box ba{a[0][0].item<double>(), a[0][1].item<double>(), a[0][2].item<double>(), a[0][3].item<double>()};
        const Box bb{b[0][0].item<double>(), b[0][1].item<double>(), b[0][2].item<double>(), b[0][3].item<double>()};
        CHECK(giou_tensor(a, b).item<double>() == doctest::Approx(giou(ba, bb)).epsilon(1e-12));
    }
}

TEST_CASE("finite-difference gradients") {
    torch::manual_seed(0);
    Rng rng(21);
    auto w = weights();
    w.w_l1 = 1.0;
    w.w_giou = 2.0;
    for (int rep = 0; rep < 5; ++rep) {
        const auto targets = torch::randint(0, 6, {2, 4}, torch::kInt64);
        const auto mask = torch::tensor({{1, 1, 0, 1}, {0, 1, 1, 1}});
        CHECK(gradient_rel_error([&](const torch::Tensor& x) { return language_loss(x, targets, mask, 2); },
                                 torch::randn({2, 4, 6}, f64)) < 1e-6);

        const auto gt = (torch::rand({2, 4, 4}, f64) < 0.5).to(torch::kFloat64);
        CHECK(gradient_rel_error([&](const torch::Tensor& x) { return seg_loss_logits(x, gt, w, 2); },
                                 torch::randn({2, 4, 4}, f64)) < 1e-6);

        const auto gboxes = random_boxes(rng, 2);
        const auto pboxes = random_boxes(rng, 4);
        const auto logits = torch::randn({4}, f64);
        CHECK(gradient_rel_error([&](const torch::Tensor& x) { return detection_loss_logits(gboxes, x, logits, w).value; },
                                 pboxes) < 1e-5);
        CHECK(gradient_rel_error([&](const torch::Tensor& x) { return detection_loss_logits(gboxes, pboxes, x, w).value; },
                                 logits) < 1e-6);
    }
}
