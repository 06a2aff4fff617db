#include "fcam/classifier.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <string>

namespace fcam {

nlohmann::json ClassifierSpec::to_json() const {
  return {{"num_classes", num_classes}, {"widths", widths}, {"head", head == HeadKind::gap_linear ? "gap_linear" : "gmp_linear"}};
}

ClassifierSpec ClassifierSpec::from_json(const nlohmann::json& j) {
  ClassifierSpec s;
  s.num_classes = j.at("num_classes").get<int>();
  s.widths = j.at("widths").get<std::vector<int>>();
  const auto head = j.value("head", std::string("gap_linear"));
  if (head == "gap_linear") s.head = HeadKind::gap_linear;
  else if (head == "gmp_linear") s.head = HeadKind::gmp_linear;
  else throw std::invalid_argument("unknown head kind: " + head);
  return s;
}

ClassifierBundle ClassifierBundle::create(const ClassifierSpec& spec, std::uint64_t seed) {
  if (spec.num_classes < 2) throw std::invalid_argument("classifier needs at least 2 classes");
  if (spec.widths.empty()) throw std::invalid_argument("encoder needs at least one stage");
  ClassifierBundle b;
  b.spec_ = spec;
  b.seed_ = seed;
  nn::Rng rng(seed);
  int in = ImageTensor::kChannels;
  for (std::size_t s = 0; s < spec.widths.size(); ++s) {
    const int w = spec.widths[s];
    const std::string base = "encoder.stage" + std::to_string(s);
    b.blocks_.push_back(nn::ConvBlock::create(b.params_, base + ".conv0", in, w, 1, rng));
    b.blocks_.push_back(nn::ConvBlock::create(b.params_, base + ".conv1", w, w, 1, rng));
    b.blocks_.push_back(nn::ConvBlock::create(b.params_, base + ".down", w, w, 2, rng));
    in = w;
  }
  b.head_ = nn::Linear::create(b.params_, "head.fc", in, spec.num_classes, rng);
  return b;
}

void ClassifierBundle::check_input(int height, int width) const {
  const int f = spec_.downsample();
  if (height < f || width < f || height % f != 0 || width % f != 0) {
    throw std::invalid_argument("input " + std::to_string(height) + "x" + std::to_string(width) +
                                " is not a positive multiple of the downsample factor " + std::to_string(f));
  }
}

nn::Tensor to_tensor(const ImageTensor& image) {
  nn::Tensor t(ImageTensor::kChannels, image.height(), image.width());
  for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] = image.data()[i] - 0.5f;
  return t;
}

EncoderFeatures ClassifierBundle::encode(const ImageTensor& image, EncoderCache* cache) const {
  check_input(image.height(), image.width());
  EncoderFeatures f;
  nn::Tensor x = to_tensor(image);
  if (cache) {
    cache->input = x;
    cache->blocks.assign(blocks_.size(), {});
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    x = blocks_[i].forward(params_, x, cache ? &cache->blocks[i] : nullptr);
    if (i % 3 == 1) f.skips.push_back(x);
  }
  f.top = std::move(x);
  return f;
}

std::vector<float> ClassifierBundle::logits(const EncoderFeatures& features) const {
  const nn::Tensor& a = features.top;
  std::vector<float> pooled;
  if (spec_.head == HeadKind::gap_linear) {
    pooled = nn::global_average_pool(a);
  } else {
    pooled.resize(a.c);
    for (int c = 0; c < a.c; ++c) pooled[c] = *std::max_element(a.channel(c), a.channel(c) + a.plane());
  }
  return head_.forward(params_, pooled);
}

nn::Tensor ClassifierBundle::backward(const EncoderFeatures& features, const EncoderCache& cache,
                                      const std::vector<float>& dlogits, nn::Gradients& grads,
                                      bool through_encoder) const {
  if (inference_only_) throw std::logic_error("gradients unavailable: bundle is inference-only");
  const nn::Tensor& a = features.top;
  std::vector<float> pooled;
  nn::Tensor dtop;
  if (spec_.head == HeadKind::gap_linear) {
    pooled = nn::global_average_pool(a);
    const auto dpooled = head_.backward(params_, dlogits, pooled, grads);
    dtop = nn::global_average_pool_backward(dpooled, a.c, a.h, a.w);
  } else {
    pooled.resize(a.c);
    std::vector<std::size_t> where(a.c);
    for (int c = 0; c < a.c; ++c) {
      const float* p = a.channel(c);
      const auto it = std::max_element(p, p + a.plane());
      pooled[c] = *it;
      where[c] = static_cast<std::size_t>(it - p);
    }
    const auto dpooled = head_.backward(params_, dlogits, pooled, grads);
    dtop = nn::Tensor(a.c, a.h, a.w);
    for (int c = 0; c < a.c; ++c) dtop.channel(c)[where[c]] = dpooled[c];
  }
  if (!through_encoder) return dtop;
  if (cache.blocks.size() != blocks_.size()) throw std::logic_error("encoder cache missing; run encode with a cache");
  nn::Tensor d = dtop;
  for (std::size_t i = blocks_.size(); i-- > 0;) {
    d = blocks_[i].backward(params_, d, cache.blocks[i], grads, i > 0);
  }
  return dtop;
}

std::vector<float> ClassifierBundle::class_weights(int k) const {
  if (k < 0 || k >= spec_.num_classes) throw std::out_of_range("class id out of range");
  const auto& w = params_[head_.weight].value;
  const int d = head_.in_features;
  return {w.begin() + static_cast<std::ptrdiff_t>(k) * d, w.begin() + static_cast<std::ptrdiff_t>(k + 1) * d};
}

std::vector<double> forward_classify(const ClassifierBundle& bundle, const ImageTensor& image) {
  return nn::softmax(bundle.logits(bundle.encode(image)));
}

int argmax(const std::vector<double>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<int> top_k(const std::vector<double>& v, int k) {
  std::vector<int> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return v[a] > v[b]; });
  idx.resize(std::min<std::size_t>(idx.size(), static_cast<std::size_t>(std::max(k, 0))));
  return idx;
}

}  // namespace fcam
