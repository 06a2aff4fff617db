#include "fcam/decoder.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>

namespace fcam {

DecoderSpec DecoderSpec::for_encoder(const ClassifierSpec& enc) {
  DecoderSpec d;
  d.top_width = enc.widths.back();
  d.skip_widths.assign(enc.widths.rbegin(), enc.widths.rend());
  d.stage_widths.clear();
  for (std::size_t i = 0; i < d.skip_widths.size(); ++i) {
    d.stage_widths.push_back(i + 1 < d.skip_widths.size() ? d.skip_widths[i + 1] : d.skip_widths[i]);
  }
  return d;
}

std::size_t DecoderSpec::param_count() const {
  std::size_t n = 0;
  int in = top_width;
  for (int i = 0; i < num_stages(); ++i) {
    const std::size_t cat = static_cast<std::size_t>(in) + skip_widths[i];
    const std::size_t out = stage_widths[i];
    n += cat * out * 9 + out + 2 * out;
    n += out * out * 9 + out + 2 * out;
    in = stage_widths[i];
  }
  return n + static_cast<std::size_t>(in) * 2 + 2;
}

nlohmann::json DecoderSpec::to_json() const {
  return {{"top_width", top_width}, {"skip_widths", skip_widths}, {"stage_widths", stage_widths}};
}

DecoderSpec DecoderSpec::from_json(const nlohmann::json& j) {
  DecoderSpec d;
  d.top_width = j.at("top_width").get<int>();
  d.skip_widths = j.at("skip_widths").get<std::vector<int>>();
  d.stage_widths = j.at("stage_widths").get<std::vector<int>>();
  return d;
}

Decoder Decoder::init(const DecoderSpec& spec, std::uint64_t seed) {
  if (spec.skip_widths.size() != spec.stage_widths.size() || spec.stage_widths.empty())
    throw std::invalid_argument("decoder spec: one skip width per stage required");
  Decoder d;
  d.spec_ = spec;
  d.seed_ = seed;
  nn::Rng rng(seed);
  int in = spec.top_width;
  for (int i = 0; i < spec.num_stages(); ++i) {
    const std::string base = "decoder.stage" + std::to_string(i);
    Stage s;
    s.block0 = nn::ConvBlock::create(d.params_, base + ".conv0", in + spec.skip_widths[i], spec.stage_widths[i], 1, rng);
    s.block1 = nn::ConvBlock::create(d.params_, base + ".conv1", spec.stage_widths[i], spec.stage_widths[i], 1, rng);
    d.stages_.push_back(s);
    in = spec.stage_widths[i];
  }
  d.head_ = nn::Conv2d::create(d.params_, "decoder.head", in, 2, 1, 1, rng);
  return d;
}

void Decoder::check_features(const EncoderFeatures& f) const {
  if (f.top.c != spec_.top_width) throw std::invalid_argument("decoder: top feature width mismatch");
  if (f.skips.size() != static_cast<std::size_t>(spec_.num_stages()))
    throw std::invalid_argument("decoder: encoder stage count does not match decoder stages");
  int h = f.top.h, w = f.top.w;
  for (int i = 0; i < spec_.num_stages(); ++i) {
    const nn::Tensor& skip = f.skips[f.skips.size() - 1 - i];
    h *= 2;
    w *= 2;
    if (skip.c != spec_.skip_widths[i] || skip.h != h || skip.w != w)
      throw std::invalid_argument("decoder: skip feature " + std::to_string(i) + " has unexpected shape");
  }
}

SoftmaxMaps Decoder::decode(const EncoderFeatures& features, int height, int width, DecoderCache* cache) const {
  check_features(features);
  if (cache) cache->stages.assign(stages_.size(), {});
  nn::Tensor x = features.top;
  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const nn::Tensor& skip = features.skips[features.skips.size() - 1 - i];
    nn::Tensor up = nn::upsample_nearest2x(x);
    if (cache) cache->stages[i].up_channels = up.c;
    nn::Tensor cat = nn::concat_channels(up, skip);
    x = stages_[i].block0.forward(params_, cat, cache ? &cache->stages[i].block0 : nullptr);
    x = stages_[i].block1.forward(params_, x, cache ? &cache->stages[i].block1 : nullptr);
  }
  if (x.h != height || x.w != width) throw std::invalid_argument("decoder output does not match image dims");
  const nn::Tensor logits = head_.forward(params_, x, cache ? &cache->head : nullptr);
  SoftmaxMaps s{height, width, std::vector<double>(logits.plane()), std::vector<double>(logits.plane())};
  const float* z0 = logits.channel(0);
  const float* z1 = logits.channel(1);
  for (std::size_t p = 0; p < logits.plane(); ++p) {
    const double d = static_cast<double>(z1[p]) - z0[p];
    // Numerically stable two-way softmax.
    const double fg = d >= 0 ? 1.0 / (1.0 + std::exp(-d)) : std::exp(d) / (1.0 + std::exp(d));
    s.foreground[p] = fg;
    s.background[p] = 1.0 - fg;
  }
  if (cache) cache->maps = s;
  return s;
}

void Decoder::backward(const MapGradient& dmaps, const DecoderCache& cache, nn::Gradients& grads) const {
  const SoftmaxMaps& s = cache.maps;
  nn::Tensor dlogits(2, s.height, s.width);
  for (std::size_t p = 0; p < s.size(); ++p) {
    const double s0 = s.background[p], s1 = s.foreground[p];
    const double g0 = dmaps.background[p], g1 = dmaps.foreground[p];
    const double dot = s0 * g0 + s1 * g1;
    dlogits.channel(0)[p] = static_cast<float>(s0 * (g0 - dot));
    dlogits.channel(1)[p] = static_cast<float>(s1 * (g1 - dot));
  }
  nn::Tensor d = head_.backward(params_, dlogits, cache.head, grads, true);
  for (std::size_t i = stages_.size(); i-- > 0;) {
    d = stages_[i].block1.backward(params_, d, cache.stages[i].block1, grads, true);
    d = stages_[i].block0.backward(params_, d, cache.stages[i].block0, grads, i > 0);
    if (i == 0) break;
    auto parts = nn::split_channels(d, cache.stages[i].up_channels);
    d = nn::upsample_nearest2x_backward(parts.first);
  }
}

FcamOutput fcam_inference(const ClassifierBundle& bundle, const Decoder& decoder, const ImageTensor& image) {
  const EncoderFeatures f = bundle.encode(image);
  FcamOutput out;
  out.probs = nn::softmax(bundle.logits(f));
  out.maps = decoder.decode(f, image.height(), image.width());
  out.cam.height = image.height();
  out.cam.width = image.width();
  out.cam.source = CamSource::fcam_foreground;
  out.cam.data.assign(out.maps.foreground.begin(), out.maps.foreground.end());
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& o, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  o.write(b, 4);
}

class Reader {
 public:
  explicit Reader(std::vector<char> bytes) : bytes_(std::move(bytes)) {}
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw RasterError("truncated checkpoint", bytes_.size());
  }
  std::vector<char> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_parameters(const std::filesystem::path& path, const nn::ParameterSet& params, const nlohmann::json& manifest) {
  {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write checkpoint: " + path.string());
    f.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    put_u32(f, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params.all()) {
      put_u32(f, static_cast<std::uint32_t>(p.name.size()));
      f.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      put_u32(f, static_cast<std::uint32_t>(p.shape.size()));
      for (int d : p.shape) put_u32(f, static_cast<std::uint32_t>(d));
      for (float v : p.value) put_u32(f, std::bit_cast<std::uint32_t>(v));
    }
  }
  std::ofstream m(sidecar_path(path));
  m << manifest.dump(2) << '\n';
}

nlohmann::json load_parameters(const std::filesystem::path& path, nn::ParameterSet& params) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path.string());
  Reader r(std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>()));
  if (r.str(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic)))
    throw RasterError("bad checkpoint magic", 0);
  const std::uint32_t count = r.u32();
  if (count != params.size()) throw RasterError("checkpoint parameter count mismatch", 8);
  for (std::uint32_t i = 0; i < count; ++i) {
    auto& p = params[i];
    const auto at = r.pos();
    const std::string name = r.str(r.u32());
    if (name != p.name) throw RasterError("checkpoint parameter name mismatch: " + name, at);
    const std::uint32_t nd = r.u32();
    std::vector<int> shape(nd);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    if (shape != p.shape) throw RasterError("checkpoint shape mismatch for " + name, at);
    for (auto& v : p.value) v = std::bit_cast<float>(r.u32());
  }
  if (!r.done()) throw RasterError("trailing bytes in checkpoint", r.pos());
  nlohmann::json manifest = nlohmann::json::object();
  if (std::filesystem::exists(sidecar_path(path))) {
    std::ifstream m(sidecar_path(path));
    manifest = nlohmann::json::parse(m);
  }
  return manifest;
}

void save_classifier(const std::filesystem::path& path, const ClassifierBundle& bundle, nlohmann::json extra) {
  nlohmann::json m = extra.is_object() ? std::move(extra) : nlohmann::json::object();
  m["kind"] = "classifier";
  m["spec"] = bundle.spec().to_json();
  m["seed"] = bundle.seed();
  m["param_hash"] = bundle.parameters().hash();
  save_parameters(path, bundle.parameters(), m);
}

std::pair<ClassifierBundle, nlohmann::json> load_classifier(const std::filesystem::path& path) {
  std::ifstream probe(sidecar_path(path));
  if (!probe) throw std::runtime_error("checkpoint manifest missing: " + sidecar_path(path).string());
  const auto manifest = nlohmann::json::parse(probe);
  if (manifest.value("kind", "") != "classifier") throw std::runtime_error("not a classifier checkpoint: " + path.string());
  auto bundle = ClassifierBundle::create(ClassifierSpec::from_json(manifest.at("spec")), manifest.at("seed").get<std::uint64_t>());
  load_parameters(path, bundle.parameters());
  return {std::move(bundle), manifest};
}

void save_decoder(const std::filesystem::path& path, const Decoder& decoder, nlohmann::json extra) {
  nlohmann::json m = extra.is_object() ? std::move(extra) : nlohmann::json::object();
  m["kind"] = "decoder";
  m["spec"] = decoder.spec().to_json();
  m["seed"] = decoder.seed();
  save_parameters(path, decoder.parameters(), m);
}

std::pair<Decoder, nlohmann::json> load_decoder(const std::filesystem::path& path) {
  std::ifstream probe(sidecar_path(path));
  if (!probe) throw std::runtime_error("checkpoint manifest missing: " + sidecar_path(path).string());
  const auto manifest = nlohmann::json::parse(probe);
  if (manifest.value("kind", "") != "decoder") throw std::runtime_error("not a decoder checkpoint: " + path.string());
  auto decoder = Decoder::init(DecoderSpec::from_json(manifest.at("spec")), manifest.at("seed").get<std::uint64_t>());
  load_parameters(path, decoder.parameters());
  return {std::move(decoder), manifest};
}

}  // namespace fcam
