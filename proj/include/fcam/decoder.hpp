#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "fcam/classifier.hpp"
#include "fcam/data_model.hpp"
#include "fcam/nn.hpp"
#include "json.hpp"

namespace fcam {

/// U-Net decoder layout. Stage i upsamples by 2, concatenates the skip
/// feature of matching resolution, then applies two conv-norm-ReLU
/// blocks with stage_widths[i] outputs. A 1x1 conv maps to 2 channels.
struct DecoderSpec {
  int top_width = 128;
  std::vector<int> skip_widths{128, 64, 32, 16};  // coarsest first
  std::vector<int> stage_widths{64, 32, 16, 16};

  int num_stages() const { return static_cast<int>(stage_widths.size()); }
  /// Derived from the encoder: skips are consumed coarsest first and stage
  /// i outputs the width of the next-finer skip (the finest stage keeps it).
  static DecoderSpec for_encoder(const ClassifierSpec& enc);
  std::size_t param_count() const;

  nlohmann::json to_json() const;
  static DecoderSpec from_json(const nlohmann::json& j);
};

struct DecoderCache {
  struct Stage {
    int up_channels = 0;
    nn::ConvBlock::Cache block0;
    nn::ConvBlock::Cache block1;
  };
  std::vector<Stage> stages;
  nn::Conv2d::Cache head;
  SoftmaxMaps maps;
};

class Decoder {
 public:
  /// He fan-in initialization, deterministic under the seed.
  static Decoder init(const DecoderSpec& spec, std::uint64_t seed);

  const DecoderSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  const nn::ParameterSet& parameters() const { return params_; }
  nn::ParameterSet& parameters() { return params_; }

  /// Throws std::invalid_argument if the features do not match the spec.
  void check_features(const EncoderFeatures& features) const;

  SoftmaxMaps decode(const EncoderFeatures& features, int height, int width, DecoderCache* cache = nullptr) const;
  /// Backpropagates dL/dS into decoder parameter gradients. Encoder
  /// features are treated as constants.
  void backward(const MapGradient& dmaps, const DecoderCache& cache, nn::Gradients& grads) const;

 private:
  struct Stage {
    nn::ConvBlock block0;
    nn::ConvBlock block1;
  };

  DecoderSpec spec_;
  std::uint64_t seed_ = 0;
  nn::ParameterSet params_;
  std::vector<Stage> stages_;
  nn::Conv2d head_;
};

/// Class probabilities and the foreground map S2 as a Cam.
struct FcamOutput {
  std::vector<double> probs;
  Cam cam;
  SoftmaxMaps maps;
};

FcamOutput fcam_inference(const ClassifierBundle& bundle, const Decoder& decoder, const ImageTensor& image);

// ---------------------------------------------------------------------------
// Checkpoints: "FCAMCKP1" | u32 count | { u32 name_len | name | u32 ndim |
// u32 dims[ndim] | f32 payload }*, with a JSON manifest at <path>.json.

inline constexpr char kCheckpointMagic[8] = {'F', 'C', 'A', 'M', 'C', 'K', 'P', '1'};

void save_parameters(const std::filesystem::path& path, const nn::ParameterSet& params, const nlohmann::json& manifest);
/// Loads values into an existing set; names and shapes must match.
nlohmann::json load_parameters(const std::filesystem::path& path, nn::ParameterSet& params);

void save_classifier(const std::filesystem::path& path, const ClassifierBundle& bundle, nlohmann::json extra = {});
std::pair<ClassifierBundle, nlohmann::json> load_classifier(const std::filesystem::path& path);
void save_decoder(const std::filesystem::path& path, const Decoder& decoder, nlohmann::json extra = {});
std::pair<Decoder, nlohmann::json> load_decoder(const std::filesystem::path& path);

}  // namespace fcam
