#pragma once

#include <cstdint>
#include <vector>

#include "fcam/data_model.hpp"
#include "fcam/nn.hpp"
#include "json.hpp"

namespace fcam {

enum class HeadKind { gap_linear, gmp_linear };

struct ClassifierSpec {
  int num_classes = 3;
  // One entry per encoder stage; every stage halves the resolution.
  std::vector<int> widths{16, 32, 64, 128};
  HeadKind head = HeadKind::gap_linear;

  int downsample() const { return 1 << widths.size(); }
  nlohmann::json to_json() const;
  static ClassifierSpec from_json(const nlohmann::json& j);
};

/// Output of the encoder: the top feature stack A (D maps at H/2^S) and
/// the per-stage skip features, finest first. skips[s] has widths[s]
/// channels at H/2^s.
struct EncoderFeatures {
  nn::Tensor top;
  std::vector<nn::Tensor> skips;
};

struct EncoderCache {
  nn::Tensor input;
  std::vector<nn::ConvBlock::Cache> blocks;
};

/// Classifier g = encoder + pooling head. Each encoder stage is
/// conv(stride 1) -> conv(stride 1) -> conv(stride 2), each conv followed
/// by group norm and ReLU; the pre-downsampling activation is the stage's
/// skip feature.
class ClassifierBundle {
 public:
  static ClassifierBundle create(const ClassifierSpec& spec, std::uint64_t seed);

  const ClassifierSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  int num_classes() const { return spec_.num_classes; }
  int feature_channels() const { return spec_.widths.back(); }

  const nn::ParameterSet& parameters() const { return params_; }
  nn::ParameterSet& parameters() { return params_; }

  /// An inference-only bundle refuses gradient-based operations.
  bool inference_only() const { return inference_only_; }
  void set_inference_only(bool v) { inference_only_ = v; }

  /// Throws std::invalid_argument unless dims are positive multiples of
  /// the downsample factor.
  void check_input(int height, int width) const;

  EncoderFeatures encode(const ImageTensor& image, EncoderCache* cache = nullptr) const;
  std::vector<float> logits(const EncoderFeatures& features) const;

  /// Backpropagates dlogits through the head (and, when through_encoder,
  /// through the whole encoder) accumulating parameter gradients. Returns
  /// the gradient w.r.t. the top feature stack.
  nn::Tensor backward(const EncoderFeatures& features, const EncoderCache& cache, const std::vector<float>& dlogits,
                      nn::Gradients& grads, bool through_encoder) const;

  /// Linear head weights w[k][d].
  std::vector<float> class_weights(int k) const;

 private:
  ClassifierSpec spec_;
  std::uint64_t seed_ = 0;
  bool inference_only_ = false;
  nn::ParameterSet params_;
  std::vector<nn::ConvBlock> blocks_;
  nn::Linear head_;
};

nn::Tensor to_tensor(const ImageTensor& image);

/// Class probabilities g(X).
std::vector<double> forward_classify(const ClassifierBundle& bundle, const ImageTensor& image);

int argmax(const std::vector<double>& v);
/// Indices of the k largest entries, ties broken by lower index.
std::vector<int> top_k(const std::vector<double>& v, int k);

}  // namespace fcam
