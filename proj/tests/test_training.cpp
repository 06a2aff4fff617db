#include <sstream>

#include "doctest.h"
#include "fcam/training.hpp"

using namespace fcam;

namespace {

ClassifierSpec small_spec() {
  ClassifierSpec s;
  s.widths = {4, 8};
  return s;
}

std::vector<SampleRecord> synthetic_records(int per_class, int size, std::uint64_t seed, Split split) {
  std::vector<SampleRecord> out;
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < per_class; ++i) {
      auto r = render_synthetic_sample(k, size, 0.1, 0.4, seed + 100 * k + i);
      r.id = std::to_string(k) + "_" + std::to_string(i);
      r.split = split;
      out.push_back(std::move(r));
    }
  return out;
}

TrainConfig small_config() {
  TrainConfig c;
  c.stage1_epochs = 3;
  c.stage2_epochs = 2;
  c.batch_size = 4;
  c.resize = 32;
  c.crop = 32;
  c.seed = 5;
  return c;
}

LossConfig fast_loss() {
  LossConfig l;
  l.crf_downsample = 4;
  return l;
}

}  // namespace

TEST_CASE("select_model picks the best and the earliest on ties") {
  std::vector<CheckpointRecord> c{{1, 1, "memory", 0.4, 1}, {2, 1, "memory", 0.6, 1}, {3, 1, "memory", 0.6, 1}};
  CHECK(select_model(c).epoch == 2);
  c.push_back({4, 1, "memory", 0.7, 0});
  CHECK(select_model(c).epoch == 4);
  CHECK_THROWS_AS(select_model({}), std::invalid_argument);
}

TEST_CASE("config validation and json round trip") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  const TrainConfig b = TrainConfig::from_json(c.to_json());
  CHECK(b.to_json() == c.to_json());
  c.crop = 300;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.n_minus = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = TrainConfig{};
  c.selection_metric = "accuracy";
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("augmentation and evaluation views") {
  const auto r = render_synthetic_sample(0, 32, 0.1, 0.4, 3);
  TrainConfig c;
  c.resize = 40;
  c.crop = 32;
  std::mt19937_64 rng(1);
  const ImageTensor a = augment(r.image, c, rng);
  CHECK(a.height() == 32);
  CHECK(a.width() == 32);
  const SampleRecord v = eval_view(r, 64);
  CHECK(v.image.height() == 64);
  CHECK(v.gt_mask->size() == 64u * 64u);
  CHECK(v.gt_boxes[0].x0 == 2 * r.gt_boxes[0].x0);
  CHECK(v.gt_boxes[0].x1 == 2 * r.gt_boxes[0].x1);
  const SampleRecord same = eval_view(r, 32);
  CHECK(same.image.data() == r.image.data());
  CHECK(same.gt_boxes == r.gt_boxes);
}

TEST_CASE("stage 1 lowers the training loss and is reproducible") {
  const auto train = synthetic_records(4, 32, 1, Split::train);
  const auto val = synthetic_records(2, 32, 500, Split::val);
  const TrainConfig cfg = small_config();
  std::ostringstream log;
  const Stage1Result a = train_classifier(ClassifierBundle::create(small_spec(), 1), train, val, cfg, &log);
  REQUIRE(a.epoch_losses.size() == 3u);
  CHECK(a.epoch_losses.back() < a.epoch_losses.front());
  CHECK(a.checkpoints.size() == 3u);
  CHECK(a.selected.epoch == select_model(a.checkpoints).epoch);
  // One json line per epoch.
  std::istringstream lines(log.str());
  int n = 0;
  for (std::string l; std::getline(lines, l); ++n) CHECK(nlohmann::json::parse(l).at("stage") == 1);
  CHECK(n == 3);
  const Stage1Result b = train_classifier(ClassifierBundle::create(small_spec(), 1), train, val, cfg);
  CHECK(a.bundle.parameters().hash() == b.bundle.parameters().hash());
}

TEST_CASE("stage 2 freezes the classifier and trains the decoder") {
  const auto train = synthetic_records(2, 32, 1, Split::train);
  const auto val = synthetic_records(1, 32, 500, Split::val);
  const auto bundle = ClassifierBundle::create(small_spec(), 2);
  const auto before = bundle.parameters().hash();
  const Decoder init = Decoder::init(DecoderSpec::for_encoder(small_spec()), 3);
  TrainConfig cfg = small_config();
  const Stage2Result r = finetune_decoder(bundle, init, train, val, cfg, fast_loss());
  CHECK(bundle.parameters().hash() == before);
  CHECK(r.epoch_losses.size() == 2u);
  CHECK(r.t_trajectory == std::vector<double>{1.0, 1.01});
  CHECK(r.final_loss.barrier_t == doctest::Approx(std::pow(1.01, 2)));
  CHECK(classification_accuracy(bundle, nullptr, val) == classification_accuracy(bundle, &r.decoder, val));

  SUBCASE("zero learning rate leaves the decoder untouched") {
    cfg.lr = 0.0;
    const Stage2Result z = finetune_decoder(bundle, init, train, val, cfg, fast_loss());
    CHECK(z.decoder.parameters().hash() == init.parameters().hash());
  }
  SUBCASE("same seed, same decoder") {
    const Stage2Result again = finetune_decoder(bundle, init, train, val, cfg, fast_loss());
    CHECK(again.decoder.parameters().hash() == r.decoder.parameters().hash());
  }
  SUBCASE("no sampled pixels means no partial cross-entropy") {
    cfg.k_fg = cfg.k_bg = 0;
    const Stage2Result z = finetune_decoder(bundle, init, train, val, cfg, fast_loss());
    for (const auto& e : z.epoch_losses) CHECK(e.partial_ce == 0.0);
  }
}

TEST_CASE("stage 2 logs one line per iteration with every term") {
  const auto train = synthetic_records(1, 32, 1, Split::train);
  const auto val = synthetic_records(1, 32, 500, Split::val);
  const auto bundle = ClassifierBundle::create(small_spec(), 2);
  TrainConfig cfg = small_config();
  cfg.stage2_epochs = 1;
  std::ostringstream log;
  finetune_decoder(bundle, Decoder::init(DecoderSpec::for_encoder(small_spec()), 3), train, val, cfg, fast_loss(), &log);
  std::istringstream lines(log.str());
  int n = 0;
  for (std::string l; std::getline(lines, l);) {
    const auto j = nlohmann::json::parse(l);
    if (!j.contains("iteration")) continue;
    ++n;
    for (const char* k : {"partial_ce", "crf", "asc", "total", "t", "alpha", "lambda"}) CHECK(j.contains(k));
  }
  CHECK(n >= 1);
}

TEST_CASE("grid search covers every point and picks the first best") {
  const auto train = synthetic_records(1, 32, 1, Split::train);
  const auto val = synthetic_records(1, 32, 500, Split::val);
  const auto bundle = ClassifierBundle::create(small_spec(), 2);
  TrainConfig cfg = small_config();
  cfg.stage2_epochs = 1;
  cfg.n_minus_grid = {0.2, 0.5};
  cfg.alpha_grid = {1.0, 0.1};
  const GridSearchResult g =
      grid_search(bundle, Decoder::init(DecoderSpec::for_encoder(small_spec()), 3), train, val, cfg, fast_loss());
  REQUIRE(g.points.size() == 4u);
  for (std::size_t i = 0; i < g.points.size(); ++i) {
    CHECK(g.points[i].val_localization <= g.points[g.best].val_localization);
    if (i < g.best) CHECK(g.points[i].val_localization < g.points[g.best].val_localization);
  }
}
