#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "fcam/cam.hpp"
#include "fcam/classifier.hpp"
#include "fcam/datasets.hpp"
#include "fcam/decoder.hpp"
#include "fcam/evaluation.hpp"
#include "fcam/losses.hpp"
#include "json.hpp"

namespace fcam {

struct TrainConfig {
  int stage1_epochs = 30;
  int stage2_epochs = 20;
  int batch_size = 32;
  double lr = 0.01;  // stage 2
  double stage1_lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int resize = 256;
  int crop = 224;
  bool hflip = true;
  double n_minus = 0.3;
  int k_fg = 1;
  int k_bg = 1;
  std::vector<double> n_minus_grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
  std::vector<double> alpha_grid{1.0, 0.1};
  std::string cam_method = "gap_cam";
  // max_box_acc (sigma 0.5), max_box_acc_v2 or pxap
  std::string selection_metric = "max_box_acc";
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument on non-positive epochs/batch, crop > resize, etc.
  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct CheckpointRecord {
  int epoch = 0;
  int stage = 1;
  std::string parameters;  // file path, or "memory" for in-process snapshots
  double val_localization = 0.0;
  double val_accuracy = 0.0;

  nlohmann::json to_json() const;
};

/// Highest validation localization; ties go to the earliest epoch.
/// Throws std::invalid_argument on an empty list.
CheckpointRecord select_model(const std::vector<CheckpointRecord>& checkpoints);

// ---------------------------------------------------------------------------
// Data views

/// Training view: square resize, random crop, optional horizontal flip.
ImageTensor augment(const ImageTensor& image, const TrainConfig& cfg, std::mt19937_64& rng);

/// Evaluation view: the image resized to crop x crop, with boxes and mask
/// mapped into the new frame.
SampleRecord eval_view(const SampleRecord& record, int size);

/// Full-size localization map for one image: "fcam" uses the decoder,
/// anything else is looked up in the registry.
Cam localization_map(const ClassifierBundle& bundle, const Decoder* decoder, const std::string& method,
                     const ImageTensor& image, int target_class, const CamRegistry& registry = {});

/// Cams for the true labels plus class probabilities and ground truth.
/// Records must already be in the evaluation frame.
EvalInputs build_eval_inputs(const ClassifierBundle& bundle, const Decoder* decoder, const std::string& method,
                             const std::vector<SampleRecord>& records, const CamRegistry& registry = {});

/// Scalar used for model selection.
double selection_score(const EvalInputs& inputs, const std::string& metric);

/// Top-1 accuracy of the classifier alone, or through fcam_inference when
/// a decoder is attached.
double classification_accuracy(const ClassifierBundle& bundle, const Decoder* decoder,
                               const std::vector<SampleRecord>& records);

// ---------------------------------------------------------------------------
// Stages

struct Stage1Result {
  ClassifierBundle bundle;  // selected checkpoint
  std::vector<CheckpointRecord> checkpoints;
  CheckpointRecord selected;
  std::vector<double> epoch_losses;  // mean training CE per epoch
};

/// Stage 1: optimizes classification cross-entropy only. A JSON line per
/// epoch goes to `log` when given.
Stage1Result train_classifier(ClassifierBundle bundle, const std::vector<SampleRecord>& train,
                              const std::vector<SampleRecord>& val, const TrainConfig& cfg,
                              std::ostream* log = nullptr);

struct Stage2Result {
  Decoder decoder;  // selected checkpoint
  LossConfig final_loss;  // barrier t after the last epoch
  std::vector<CheckpointRecord> checkpoints;
  CheckpointRecord selected;
  std::vector<LossBreakdown> epoch_losses;  // per-sample means
  std::vector<double> t_trajectory;  // t used during each epoch
};

/// Stage 2: the classifier is frozen; per sample the CAM of the true label
/// is extracted from the augmented view, turned into pseudo-labels, and
/// the decoder is updated on alpha*H + lambda*R + ASC. Throws
/// std::logic_error if the classifier parameters change.
Stage2Result finetune_decoder(const ClassifierBundle& bundle, Decoder decoder, const std::vector<SampleRecord>& train,
                              const std::vector<SampleRecord>& val, const TrainConfig& cfg, const LossConfig& loss,
                              std::ostream* log = nullptr);

/// Mean loss breakdown of a decoder on fixed views (no augmentation, fixed
/// sampling seed).
LossBreakdown held_out_loss(const ClassifierBundle& bundle, const Decoder& decoder,
                            const std::vector<SampleRecord>& records, const TrainConfig& cfg, const LossConfig& loss);

struct GridPoint {
  double n_minus = 0.0;
  double alpha = 0.0;
  double val_localization = 0.0;
  CheckpointRecord selected;
};

struct GridSearchResult {
  std::vector<GridPoint> points;
  std::size_t best = 0;  // first point on ties
  Decoder decoder;
};

/// Runs stage 2 once per (n_minus, alpha) grid point from the same decoder
/// initialization.
GridSearchResult grid_search(const ClassifierBundle& bundle, const Decoder& init,
                             const std::vector<SampleRecord>& train, const std::vector<SampleRecord>& val,
                             const TrainConfig& cfg, const LossConfig& loss, std::ostream* log = nullptr);

}  // namespace fcam
