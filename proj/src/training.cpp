#include "fcam/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace fcam {

void TrainConfig::validate() const {
  if (stage1_epochs < 0 || stage2_epochs < 0) throw std::invalid_argument("epoch counts must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  if (!(lr >= 0.0) || !(stage1_lr >= 0.0)) throw std::invalid_argument("learning rates must be non-negative");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must be in [0,1)");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
  if (crop < 1 || resize < 1) throw std::invalid_argument("resize and crop must be positive");
  if (crop > resize) throw std::invalid_argument("crop must not exceed resize");
  if (!(n_minus > 0.0 && n_minus <= 1.0)) throw std::invalid_argument("n_minus must be in (0,1]");
  if (k_fg < 0 || k_bg < 0) throw std::invalid_argument("sample counts must be non-negative");
  for (double v : n_minus_grid)
    if (!(v > 0.0 && v <= 1.0)) throw std::invalid_argument("n_minus grid values must be in (0,1]");
  if (n_minus_grid.empty() || alpha_grid.empty()) throw std::invalid_argument("grids must not be empty");
  if (selection_metric != "max_box_acc" && selection_metric != "max_box_acc_v2" && selection_metric != "pxap")
    throw std::invalid_argument("unknown selection metric: " + selection_metric);
}

nlohmann::json TrainConfig::to_json() const {
  return {{"stage1_epochs", stage1_epochs},
          {"stage2_epochs", stage2_epochs},
          {"batch_size", batch_size},
          {"lr", lr},
          {"stage1_lr", stage1_lr},
          {"momentum", momentum},
          {"weight_decay", weight_decay},
          {"resize", resize},
          {"crop", crop},
          {"hflip", hflip},
          {"n_minus", n_minus},
          {"k_fg", k_fg},
          {"k_bg", k_bg},
          {"n_minus_grid", n_minus_grid},
          {"alpha_grid", alpha_grid},
          {"cam_method", cam_method},
          {"selection_metric", selection_metric},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.stage1_epochs = j.value("stage1_epochs", c.stage1_epochs);
  c.stage2_epochs = j.value("stage2_epochs", c.stage2_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.stage1_lr = j.value("stage1_lr", c.stage1_lr);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.resize = j.value("resize", c.resize);
  c.crop = j.value("crop", c.crop);
  c.hflip = j.value("hflip", c.hflip);
  c.n_minus = j.value("n_minus", c.n_minus);
  c.k_fg = j.value("k_fg", c.k_fg);
  c.k_bg = j.value("k_bg", c.k_bg);
  c.n_minus_grid = j.value("n_minus_grid", c.n_minus_grid);
  c.alpha_grid = j.value("alpha_grid", c.alpha_grid);
  c.cam_method = j.value("cam_method", c.cam_method);
  c.selection_metric = j.value("selection_metric", c.selection_metric);
  c.seed = j.value("seed", c.seed);
  return c;
}

nlohmann::json CheckpointRecord::to_json() const {
  return {{"epoch", epoch},
          {"stage", stage},
          {"parameters", parameters},
          {"val_localization", val_localization},
          {"val_accuracy", val_accuracy}};
}

CheckpointRecord select_model(const std::vector<CheckpointRecord>& checkpoints) {
  if (checkpoints.empty()) throw std::invalid_argument("no checkpoints to select from");
  const CheckpointRecord* best = &checkpoints.front();
  for (const auto& c : checkpoints) {
    if (c.val_localization > best->val_localization ||
        (c.val_localization == best->val_localization && c.epoch < best->epoch))
      best = &c;
  }
  return *best;
}

// ---------------------------------------------------------------------------

ImageTensor augment(const ImageTensor& image, const TrainConfig& cfg, std::mt19937_64& rng) {
  const ImageTensor& base = (image.height() == cfg.resize && image.width() == cfg.resize)
                                ? image
                                : resize_image(image, cfg.resize, cfg.resize);
  std::uniform_int_distribution<int> off(0, cfg.resize - cfg.crop);
  const int oy = off(rng);
  const int ox = off(rng);
  const bool flip = cfg.hflip && std::bernoulli_distribution(0.5)(rng);
  ImageTensor out(cfg.crop, cfg.crop);
  for (int c = 0; c < ImageTensor::kChannels; ++c)
    for (int y = 0; y < cfg.crop; ++y)
      for (int x = 0; x < cfg.crop; ++x) out.at(c, y, x) = base.at(c, oy + y, ox + (flip ? cfg.crop - 1 - x : x));
  return out;
}

SampleRecord eval_view(const SampleRecord& record, int size) {
  const int h = record.image.height();
  const int w = record.image.width();
  if (h == size && w == size) return record;
  SampleRecord r = record;
  r.image = resize_image(record.image, size, size);
  const double sx = static_cast<double>(size) / w;
  const double sy = static_cast<double>(size) / h;
  for (auto& b : r.gt_boxes) {
    b.x0 = std::clamp(static_cast<int>(std::lround(b.x0 * sx)), 0, size);
    b.x1 = std::clamp(static_cast<int>(std::lround(b.x1 * sx)), 0, size);
    b.y0 = std::clamp(static_cast<int>(std::lround(b.y0 * sy)), 0, size);
    b.y1 = std::clamp(static_cast<int>(std::lround(b.y1 * sy)), 0, size);
  }
  if (record.gt_mask) {
    BinaryMask m(static_cast<std::size_t>(size) * size);
    for (int y = 0; y < size; ++y) {
      const int src_y = std::min(h - 1, static_cast<int>((y + 0.5) * h / size));
      for (int x = 0; x < size; ++x) {
        const int src_x = std::min(w - 1, static_cast<int>((x + 0.5) * w / size));
        m[static_cast<std::size_t>(y) * size + x] = (*record.gt_mask)[static_cast<std::size_t>(src_y) * w + src_x];
      }
    }
    r.gt_mask = std::move(m);
  }
  return r;
}

Cam localization_map(const ClassifierBundle& bundle, const Decoder* decoder, const std::string& method,
                     const ImageTensor& image, int target_class, const CamRegistry& registry) {
  if (method == "fcam") {
    if (!decoder) throw std::invalid_argument("fcam maps need a decoder");
    return fcam_inference(bundle, *decoder, image).cam;
  }
  return full_resolution_cam(registry.get(method), bundle, image, target_class);
}

EvalInputs build_eval_inputs(const ClassifierBundle& bundle, const Decoder* decoder, const std::string& method,
                             const std::vector<SampleRecord>& records, const CamRegistry& registry) {
  EvalInputs in;
  bool masks = !records.empty();
  for (const auto& r : records) masks = masks && r.gt_mask.has_value();
  for (const auto& r : records) {
    if (method == "fcam") {
      if (!decoder) throw std::invalid_argument("fcam maps need a decoder");
      FcamOutput o = fcam_inference(bundle, *decoder, r.image);
      in.cams.push_back(std::move(o.cam));
      in.class_probs.push_back(std::move(o.probs));
    } else {
      in.cams.push_back(full_resolution_cam(registry.get(method), bundle, r.image, r.label));
      in.class_probs.push_back(forward_classify(bundle, r.image));
    }
    in.gt_boxes.push_back(r.gt_boxes);
    in.labels.push_back(r.label);
    if (masks) in.gt_masks.push_back(*r.gt_mask);
  }
  return in;
}

double selection_score(const EvalInputs& inputs, const std::string& metric) {
  if (metric == "max_box_acc") return max_box_acc(inputs.cams, inputs.gt_boxes, 0.5).score;
  if (metric == "max_box_acc_v2") {
    const auto table = box_iou_table(inputs.cams, inputs.gt_boxes);
    double s = 0.0;
    for (double sigma : kV2Sigmas) s += max_box_acc_from_table(table, sigma).score;
    return s / static_cast<double>(kV2Sigmas.size());
  }
  if (metric == "pxap") return pxap(inputs.cams, inputs.gt_masks).score;
  throw std::invalid_argument("unknown selection metric: " + metric);
}

double classification_accuracy(const ClassifierBundle& bundle, const Decoder* decoder,
                               const std::vector<SampleRecord>& records) {
  if (records.empty()) return 0.0;
  std::size_t correct = 0;
  for (const auto& r : records) {
    const auto probs = decoder ? fcam_inference(bundle, *decoder, r.image).probs : forward_classify(bundle, r.image);
    if (argmax(probs) == r.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kStage1Stream = 0x5a17'0001;
constexpr std::uint64_t kStage2Stream = 0x5a17'0002;
constexpr std::uint64_t kHeldOutStream = 0x5a17'0003;

std::vector<std::size_t> shuffled(std::size_t n, std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::vector<SampleRecord> eval_views(const std::vector<SampleRecord>& records, int size) {
  std::vector<SampleRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(eval_view(r, size));
  return out;
}

void emit(std::ostream* log, const nlohmann::json& line) {
  if (log) *log << line.dump() << '\n' << std::flush;
}

nn::SgdOptions sgd_options(double lr, const TrainConfig& cfg) {
  return {static_cast<float>(lr), static_cast<float>(cfg.momentum), static_cast<float>(cfg.weight_decay)};
}

Cam training_cam(const ClassifierBundle& bundle, const EncoderFeatures& features, const ImageTensor& image, int label,
                 const std::string& method, const CamRegistry& registry) {
  // GAP-CAM is read off the features already computed for the decoder.
  Cam low = method == "gap_cam" ? extract_cam_gap(bundle, features, label) : registry.get(method)(bundle, image, label);
  if (low.height == image.height() && low.width == image.width()) return low;
  return interpolate_cam(low, image.height(), image.width());
}

// Loss (and optionally decoder gradients) of one view.
LossBreakdown decoder_sample(const ClassifierBundle& bundle, const Decoder& decoder, const ImageTensor& x, int label,
                             const TrainConfig& cfg, const LossConfig& loss, const CamRegistry& registry,
                             std::mt19937_64& rng, nn::Gradients* grads) {
  const EncoderFeatures f = bundle.encode(x);
  const Cam cam = training_cam(bundle, f, x, label, cfg.cam_method, registry);
  const SamplingRegions regions = build_sampling_regions(cam, cfg.n_minus);
  const StochasticPixelSet picked =
      loss.use_sr ? sample_pixels(regions, cfg.k_fg, cfg.k_bg, rng) : StochasticPixelSet{};
  const PseudoLabelMask mask = build_pseudo_mask(x.height(), x.width(), picked);
  DecoderCache cache;
  const SoftmaxMaps maps = decoder.decode(f, x.height(), x.width(), grads ? &cache : nullptr);
  const std::vector<double> probs = nn::softmax(bundle.logits(f));
  if (!grads) return total_loss(probs, label, maps, mask, x, loss, TrainingStage::decoder);
  MapGradient g = MapGradient::zeros(maps.size());
  const LossBreakdown lb = total_loss(probs, label, maps, mask, x, loss, TrainingStage::decoder, &g);
  decoder.backward(g, cache, *grads);
  return lb;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& lb) {
  acc.classification += lb.classification;
  acc.partial_ce += lb.partial_ce;
  acc.crf += lb.crf;
  acc.asc += lb.asc;
  acc.total += lb.total;
}

LossBreakdown divided(LossBreakdown lb, double n) {
  lb.classification /= n;
  lb.partial_ce /= n;
  lb.crf /= n;
  lb.asc /= n;
  lb.total /= n;
  return lb;
}

}  // namespace

Stage1Result train_classifier(ClassifierBundle bundle, const std::vector<SampleRecord>& train,
                              const std::vector<SampleRecord>& val, const TrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("stage 1 needs a non-empty training set");
  if (bundle.inference_only()) throw std::invalid_argument("classifier bundle is inference-only");
  bundle.check_input(cfg.crop, cfg.crop);
  const CamRegistry registry;
  const auto val_views = eval_views(val, cfg.crop);
  std::mt19937_64 rng(cfg.seed ^ kStage1Stream);
  nn::Sgd sgd(bundle.parameters(), sgd_options(cfg.stage1_lr, cfg));
  nn::Gradients grads(bundle.parameters());

  Stage1Result res;
  nn::ParameterSet best = bundle.parameters();
  auto score_epoch = [&](int epoch) {
    CheckpointRecord rec{epoch, 1, "memory", 0.0, 0.0};
    if (!val_views.empty()) {
      const EvalInputs in = build_eval_inputs(bundle, nullptr, cfg.cam_method, val_views, registry);
      rec.val_localization = selection_score(in, cfg.selection_metric);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < in.labels.size(); ++i) correct += argmax(in.class_probs[i]) == in.labels[i];
      rec.val_accuracy = static_cast<double>(correct) / static_cast<double>(in.labels.size());
    }
    const bool better = res.checkpoints.empty() || rec.val_localization > res.selected.val_localization;
    res.checkpoints.push_back(rec);
    if (better) {
      res.selected = rec;
      best = bundle.parameters();
    }
    return rec;
  };

  for (int epoch = 1; epoch <= cfg.stage1_epochs; ++epoch) {
    const auto order = shuffled(train.size(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      grads.zero();
      for (std::size_t i = start; i < end; ++i) {
        const SampleRecord& r = train[order[i]];
        const ImageTensor x = augment(r.image, cfg, rng);
        EncoderCache cache;
        const EncoderFeatures f = bundle.encode(x, &cache);
        const std::vector<double> probs = nn::softmax(bundle.logits(f));
        epoch_loss += classification_ce(probs, r.label);
        bundle.backward(f, cache, classification_ce_logit_grad(probs, r.label), grads, true);
      }
      grads.scale(1.0f / static_cast<float>(end - start));
      sgd.step(bundle.parameters(), grads);
    }
    if (!bundle.parameters().all_finite()) throw std::runtime_error("stage 1 diverged (non-finite parameters)");
    epoch_loss /= static_cast<double>(train.size());
    res.epoch_losses.push_back(epoch_loss);
    const CheckpointRecord rec = score_epoch(epoch);
    emit(log, {{"stage", 1},
               {"epoch", epoch},
               {"train_ce", epoch_loss},
               {"val_accuracy", rec.val_accuracy},
               {"val_localization", rec.val_localization}});
  }
  if (res.checkpoints.empty()) score_epoch(0);
  bundle.parameters() = best;
  res.bundle = std::move(bundle);
  return res;
}

Stage2Result finetune_decoder(const ClassifierBundle& bundle, Decoder decoder, const std::vector<SampleRecord>& train,
                              const std::vector<SampleRecord>& val, const TrainConfig& cfg, const LossConfig& loss_in,
                              std::ostream* log) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("stage 2 needs a non-empty training set");
  bundle.check_input(cfg.crop, cfg.crop);
  const std::uint64_t frozen = bundle.parameters().hash();
  const CamRegistry registry;
  const auto val_views = eval_views(val, cfg.crop);
  std::mt19937_64 rng(cfg.seed ^ kStage2Stream);
  nn::Sgd sgd(decoder.parameters(), sgd_options(cfg.lr, cfg));
  nn::Gradients grads(decoder.parameters());
  LossConfig loss = loss_in;

  Stage2Result res;
  nn::ParameterSet best = decoder.parameters();
  auto score_epoch = [&](int epoch) {
    CheckpointRecord rec{epoch, 2, "memory", 0.0, 0.0};
    if (!val_views.empty()) {
      const EvalInputs in = build_eval_inputs(bundle, &decoder, "fcam", val_views, registry);
      rec.val_localization = selection_score(in, cfg.selection_metric);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < in.labels.size(); ++i) correct += argmax(in.class_probs[i]) == in.labels[i];
      rec.val_accuracy = static_cast<double>(correct) / static_cast<double>(in.labels.size());
    }
    const bool better = res.checkpoints.empty() || rec.val_localization > res.selected.val_localization;
    res.checkpoints.push_back(rec);
    if (better) {
      res.selected = rec;
      best = decoder.parameters();
    }
    return rec;
  };

  long long iteration = 0;
  for (int epoch = 1; epoch <= cfg.stage2_epochs; ++epoch) {
    res.t_trajectory.push_back(loss.barrier_t);
    const auto order = shuffled(train.size(), rng);
    LossBreakdown epoch_loss;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      grads.zero();
      LossBreakdown batch;
      for (std::size_t i = start; i < end; ++i) {
        const SampleRecord& r = train[order[i]];
        const ImageTensor x = augment(r.image, cfg, rng);
        accumulate(batch, decoder_sample(bundle, decoder, x, r.label, cfg, loss, registry, rng, &grads));
      }
      const double n = static_cast<double>(end - start);
      grads.scale(static_cast<float>(1.0 / n));
      sgd.step(decoder.parameters(), grads);
      accumulate(epoch_loss, batch);
      nlohmann::json line = divided(batch, n).to_json();
      line["stage"] = 2;
      line["epoch"] = epoch;
      line["iteration"] = ++iteration;
      line["t"] = loss.barrier_t;
      line["alpha"] = loss.alpha;
      line["lambda"] = loss.lambda_crf;
      emit(log, line);
    }
    if (!decoder.parameters().all_finite()) throw std::runtime_error("stage 2 diverged (non-finite parameters)");
    res.epoch_losses.push_back(divided(epoch_loss, static_cast<double>(train.size())));
    loss = update_barrier_t(loss);
    const CheckpointRecord rec = score_epoch(epoch);
    nlohmann::json line = res.epoch_losses.back().to_json();
    line["stage"] = 2;
    line["epoch"] = epoch;
    line["kind"] = "epoch";
    line["val_accuracy"] = rec.val_accuracy;
    line["val_localization"] = rec.val_localization;
    emit(log, line);
  }
  if (res.checkpoints.empty()) score_epoch(0);
  if (bundle.parameters().hash() != frozen)
    throw std::logic_error("classifier parameters changed during decoder fine-tuning");
  decoder.parameters() = best;
  res.decoder = std::move(decoder);
  res.final_loss = loss;
  return res;
}

LossBreakdown held_out_loss(const ClassifierBundle& bundle, const Decoder& decoder,
                            const std::vector<SampleRecord>& records, const TrainConfig& cfg, const LossConfig& loss) {
  const CamRegistry registry;
  std::mt19937_64 rng(cfg.seed ^ kHeldOutStream);
  LossBreakdown acc;
  for (const auto& r : records) {
    const SampleRecord v = eval_view(r, cfg.crop);
    accumulate(acc, decoder_sample(bundle, decoder, v.image, v.label, cfg, loss, registry, rng, nullptr));
  }
  return records.empty() ? acc : divided(acc, static_cast<double>(records.size()));
}

GridSearchResult grid_search(const ClassifierBundle& bundle, const Decoder& init,
                             const std::vector<SampleRecord>& train, const std::vector<SampleRecord>& val,
                             const TrainConfig& cfg, const LossConfig& loss, std::ostream* log) {
  cfg.validate();
  GridSearchResult out;
  for (double nm : cfg.n_minus_grid) {
    for (double a : cfg.alpha_grid) {
      TrainConfig c = cfg;
      c.n_minus = nm;
      LossConfig l = loss;
      l.alpha = a;
      Stage2Result r = finetune_decoder(bundle, init, train, val, c, l, log);
      GridPoint p{nm, a, r.selected.val_localization, r.selected};
      emit(log, {{"kind", "grid_point"}, {"n_minus", nm}, {"alpha", a}, {"val_localization", p.val_localization}});
      if (out.points.empty() || p.val_localization > out.points[out.best].val_localization) {
        out.best = out.points.size();
        out.decoder = std::move(r.decoder);
      }
      out.points.push_back(p);
    }
  }
  return out;
}

}  // namespace fcam
