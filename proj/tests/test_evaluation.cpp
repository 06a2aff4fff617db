#include <random>

#include "doctest.h"
#include "fcam/evaluation.hpp"
#include "oracles.hpp"

using namespace fcam;

namespace {

Cam make_cam(int h, int w, std::vector<float> v) {
  Cam c;
  c.height = h;
  c.width = w;
  c.data = std::move(v);
  return c;
}

// Scores drawn from the tau grid itself, so the sweep sees every level.
Cam grid_cam(int h, int w, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> pick(0, 1000);
  std::vector<float> v(static_cast<std::size_t>(h) * w);
  for (auto& x : v) x = tau_grid()[pick(rng)];
  return make_cam(h, w, v);
}

BinaryMask random_mask(std::size_t n, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.3);
  BinaryMask m(n);
  for (auto& x : m) x = b(rng);
  m[0] = 1;
  return m;
}

}  // namespace

TEST_CASE("tau grid has 1001 evenly spaced values") {
  const auto& t = tau_grid();
  REQUIRE(t.size() == 1001u);
  CHECK(t.front() == 0.0f);
  CHECK(t.back() == 1.0f);
  CHECK(t[500] == 0.5f);
}

TEST_CASE("iou examples") {
  CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == 1.0);
  // Two 2x2 boxes overlapping in one pixel: 1 / (4 + 4 - 1).
  CHECK(iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0));
  CHECK(iou({0, 0, 2, 2}, {5, 5, 6, 6}) == 0.0);
  CHECK(iou({0, 0, 0, 0}, {0, 0, 0, 0}) == 0.0);
}

TEST_CASE("box of a filled square") {
  BinaryMask m(20 * 20, 0);
  for (int y = 5; y < 15; ++y)
    for (int x = 3; x < 13; ++x) m[y * 20 + x] = 1;
  const BoundingBox b = mask_to_box(m, 20, 20);
  CHECK(b == BoundingBox{3, 5, 13, 15});
  CHECK(b.area() == 100);
}

TEST_CASE("largest component wins over scattered blobs") {
  // A 3x3 block and a 5x5 block: the box follows the larger one.
  BinaryMask m(20 * 20, 0);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 3; ++x) m[y * 20 + x] = 1;
  for (int y = 10; y < 15; ++y)
    for (int x = 10; x < 15; ++x) m[y * 20 + x] = 1;
  CHECK(mask_to_box(m, 20, 20) == BoundingBox{10, 10, 15, 15});
  CHECK(tight_box(m, 20, 20) == BoundingBox{0, 0, 15, 15});
}

TEST_CASE("diagonal pixels split under 4-connectivity only") {
  BinaryMask m{1, 0, 0, 0, 1, 0, 0, 0, 1};
  CHECK(mask_to_box(m, 3, 3, Connectivity::four) == BoundingBox{0, 0, 1, 1});
  CHECK(mask_to_box(m, 3, 3, Connectivity::eight) == BoundingBox{0, 0, 3, 3});
  CHECK(mask_to_box(BinaryMask(9, 0), 3, 3).empty());
}

TEST_CASE("mask_to_box agrees with a BFS reference") {
  std::mt19937_64 rng(17);
  std::bernoulli_distribution b(0.45);
  for (int t = 0; t < 50; ++t) {
    BinaryMask m(12 * 9);
    for (auto& x : m) x = b(rng);
    const auto ref = oracle::largest_component_box(m, 12, 9);
    const auto got = mask_to_box(m, 12, 9);
    CHECK(got == BoundingBox{ref.x0, ref.y0, ref.x1, ref.y1});
  }
}

TEST_CASE("pxap equals the sort-based reference") {
  std::mt19937_64 rng(33);
  for (int t = 0; t < 50; ++t) {
    const Cam c = grid_cam(8, 8, rng);
    const BinaryMask m = random_mask(64, rng);
    const double ref = oracle::sorted_ap({c.data}, {m});
    CHECK(std::abs(pxap({c}, {m}).score - ref) < 1e-9);
  }
  // Pooled over several images.
  std::vector<Cam> cams;
  std::vector<BinaryMask> masks;
  std::vector<std::vector<float>> s;
  for (int i = 0; i < 5; ++i) {
    cams.push_back(grid_cam(8, 8, rng));
    masks.push_back(random_mask(64, rng));
    s.push_back(cams.back().data);
  }
  CHECK(std::abs(pxap(cams, masks).score - oracle::sorted_ap(s, masks)) < 1e-9);
}

TEST_CASE("pxap of a perfect map is one and empty GT throws") {
  const BinaryMask m{0, 1, 1, 0};
  CHECK(pxap({make_cam(2, 2, {0.0f, 1.0f, 1.0f, 0.0f})}, {m}).score == doctest::Approx(1.0));
  CHECK_THROWS(pxap({make_cam(2, 2, {0.0f, 1.0f, 1.0f, 0.0f})}, {BinaryMask(4, 0)}));
}

TEST_CASE("max_box_acc agrees with brute force") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::uniform_int_distribution<int> coord(0, 7);
  std::vector<Cam> cams;
  std::vector<std::vector<BoundingBox>> gt;
  for (int i = 0; i < 12; ++i) {
    std::vector<float> v(64);
    for (auto& x : v) x = u(rng);
    cams.push_back(make_cam(8, 8, v));
    int a = coord(rng), b = coord(rng), c = coord(rng), d = coord(rng);
    gt.push_back({{std::min(a, b), std::min(c, d), std::max(a, b) + 1, std::max(c, d) + 1}});
  }
  for (double sigma : {0.3, 0.5, 0.7}) CHECK(max_box_acc(cams, gt, sigma).score == oracle::max_box_acc(cams, gt, sigma));
}

TEST_CASE("indicator maps localize perfectly") {
  std::vector<Cam> cams;
  std::vector<std::vector<BoundingBox>> gt;
  for (int i = 0; i < 6; ++i) {
    std::vector<float> v(16 * 16, 0.0f);
    const BoundingBox b{i, i + 1, i + 5, i + 7};
    for (int y = b.y0; y < b.y1; ++y)
      for (int x = b.x0; x < b.x1; ++x) v[y * 16 + x] = 1.0f;
    cams.push_back(make_cam(16, 16, v));
    gt.push_back({b});
  }
  EvalInputs in{cams, gt, {}, {}, {}};
  const EvalReport r = evaluate(in);
  CHECK(r.max_box_acc.at(0.5) == 1.0);
  CHECK(r.max_box_acc_v2 == 1.0);
  CHECK_FALSE(r.has_pxap);
}

TEST_CASE("top-k localization is monotone in k") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Cam> cams;
  std::vector<std::vector<BoundingBox>> gt;
  std::vector<std::vector<double>> probs;
  std::vector<int> labels;
  for (int i = 0; i < 20; ++i) {
    std::vector<float> v(64, 0.0f);
    for (int y = 2; y < 6; ++y)
      for (int x = 2; x < 6; ++x) v[y * 8 + x] = 1.0f;
    cams.push_back(make_cam(8, 8, v));
    gt.push_back({{2, 2, 6, 6}});
    std::vector<double> p(6);
    for (auto& x : p) x = u(rng);
    probs.push_back(p);
    labels.push_back(i % 6);
  }
  const double t1 = topk_localization(cams, gt, probs, labels, 1, 0.5, 0.5f);
  const double t5 = topk_localization(cams, gt, probs, labels, 5, 0.5, 0.5f);
  CHECK(t5 >= t1);
  CHECK(topk_localization(cams, gt, probs, labels, 6, 0.5, 0.5f) == 1.0);
}

TEST_CASE("activation histogram and mid-range mass") {
  const std::vector<Cam> cams{make_cam(1, 4, {0.0f, 0.1f, 0.5f, 1.0f}), make_cam(1, 2, {0.5f, 0.9f})};
  const auto h = activation_histogram(cams, 4);
  REQUIRE(h.size() == 4u);
  CHECK(h[0] == doctest::Approx(2.0 / 6));
  CHECK(h[2] == doctest::Approx(2.0 / 6));
  CHECK(h[3] == doctest::Approx(2.0 / 6));
  CHECK(activation_mass_between(cams, 0.2, 0.8) == doctest::Approx(2.0 / 6));
}

TEST_CASE("robust tau width on a hand curve") {
  SweepCurve c;
  c.taus = {0.0f, 0.1f, 0.2f, 0.3f, 0.4f, 0.5f};
  c.scores = {0.1, 0.95, 1.0, 0.9, 0.5, 0.95};
  // Contiguous around the peak: 0.1 .. 0.3; the later 0.95 is cut off.
  CHECK(robust_tau_width(c, 0.9) == doctest::Approx(0.2));
}
