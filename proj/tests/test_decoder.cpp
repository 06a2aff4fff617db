#include <filesystem>
#include <random>

#include "doctest.h"
#include "fcam/decoder.hpp"

using namespace fcam;

namespace {

ImageTensor random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ImageTensor img(h, w);
  for (auto& v : img.data()) v = u(rng);
  return img;
}

ClassifierSpec small_spec() {
  ClassifierSpec s;
  s.widths = {4, 8, 8};
  return s;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("fcam_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("decoder spec mirrors the encoder") {
  const DecoderSpec d = DecoderSpec::for_encoder(ClassifierSpec{});
  CHECK(d.top_width == 128);
  CHECK(d.skip_widths == std::vector<int>{128, 64, 32, 16});
  CHECK(d.stage_widths == std::vector<int>{64, 32, 16, 16});
}

TEST_CASE("param_count matches the closed form and the allocated parameters") {
  const DecoderSpec d = DecoderSpec::for_encoder(ClassifierSpec{});
  // Per stage: conv3x3 (cat -> out) + conv3x3 (out -> out), each with bias
  // and a group-norm affine pair; then a 1x1 conv to 2 channels.
  auto block = [](std::size_t in, std::size_t out) { return in * out * 9 + out + 2 * out; };
  const std::size_t expect = block(256, 64) + block(64, 64) + block(128, 32) + block(32, 32) + block(64, 16) +
                             block(16, 16) + block(32, 16) + block(16, 16) + 16 * 2 + 2;
  CHECK(d.param_count() == expect);
  const Decoder dec = Decoder::init(d, 0);
  std::size_t n = 0;
  for (std::size_t i = 0; i < dec.parameters().size(); ++i) n += dec.parameters()[i].value.size();
  CHECK(n == expect);
}

TEST_CASE("decoder init is deterministic under the seed") {
  const DecoderSpec d = DecoderSpec::for_encoder(small_spec());
  CHECK(Decoder::init(d, 5).parameters().hash() == Decoder::init(d, 5).parameters().hash());
  CHECK(Decoder::init(d, 5).parameters().hash() != Decoder::init(d, 6).parameters().hash());
}

TEST_CASE("decoded maps match the input size and sum to one") {
  const auto b = ClassifierBundle::create(small_spec(), 1);
  const Decoder dec = Decoder::init(DecoderSpec::for_encoder(small_spec()), 2);
  for (auto [h, w] : {std::pair{64, 64}, std::pair{96, 32}, std::pair{224, 224}}) {
    const auto img = random_image(h, w, h + w);
    const SoftmaxMaps s = dec.decode(b.encode(img), h, w);
    CHECK(s.height == h);
    CHECK(s.width == w);
    REQUIRE(s.size() == static_cast<std::size_t>(h) * w);
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK(s.foreground[i] + s.background[i] == doctest::Approx(1.0).epsilon(1e-9));
      CHECK(s.foreground[i] >= 0.0);
    }
  }
}

TEST_CASE("decoder rejects mismatched features") {
  const auto b = ClassifierBundle::create(small_spec(), 1);
  ClassifierSpec other = small_spec();
  other.widths = {4, 8, 16};
  const Decoder dec = Decoder::init(DecoderSpec::for_encoder(other), 2);
  CHECK_THROWS_AS(dec.check_features(b.encode(random_image(32, 32, 1))), std::invalid_argument);
}

TEST_CASE("fcam_inference keeps the classifier output unchanged") {
  const auto b = ClassifierBundle::create(small_spec(), 3);
  const Decoder dec = Decoder::init(DecoderSpec::for_encoder(small_spec()), 4);
  const auto h = b.parameters().hash();
  for (int s = 0; s < 5; ++s) {
    const auto img = random_image(32, 32, 10 + s);
    const FcamOutput out = fcam_inference(b, dec, img);
    CHECK(out.probs == forward_classify(b, img));
    CHECK(out.cam.source == CamSource::fcam_foreground);
    CHECK(out.cam.data.size() == 32u * 32u);
    for (std::size_t i = 0; i < out.cam.data.size(); ++i)
      CHECK(out.cam.data[i] == doctest::Approx(out.maps.foreground[i]).epsilon(1e-6));
  }
  CHECK(b.parameters().hash() == h);
}

TEST_CASE("decoder backward matches finite differences on a parameter direction") {
  const auto b = ClassifierBundle::create(small_spec(), 3);
  Decoder dec = Decoder::init(DecoderSpec::for_encoder(small_spec()), 4);
  const auto feats = b.encode(random_image(16, 16, 7));
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  MapGradient r = MapGradient::zeros(256);
  for (auto& v : r.foreground) v = n(rng);
  for (auto& v : r.background) v = n(rng);
  auto objective = [&](const Decoder& d) {
    const SoftmaxMaps s = d.decode(feats, 16, 16);
    double acc = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) acc += r.foreground[i] * s.foreground[i] + r.background[i] * s.background[i];
    return acc;
  };
  DecoderCache cache;
  dec.decode(feats, 16, 16, &cache);
  nn::Gradients g(dec.parameters());
  dec.backward(r, cache, g);
  // The head bias sees no ReLU kinks downstream, so a single step size is safe.
  const std::size_t last = dec.parameters().size() - 1;
  for (std::size_t k = 0; k < dec.parameters()[last].value.size(); ++k) {
    Decoder plus = dec, minus = dec;
    plus.parameters()[last].value[k] += 1e-2f;
    minus.parameters()[last].value[k] -= 1e-2f;
    const double fd = (objective(plus) - objective(minus)) / 2e-2;
    CHECK(g[last][k] == doctest::Approx(fd).epsilon(1e-2));
  }
}

TEST_CASE("checkpoints round-trip bit-identically") {
  const auto dir = temp_dir("decoder_ckpt");
  const auto b = ClassifierBundle::create(small_spec(), 3);
  const Decoder dec = Decoder::init(DecoderSpec::for_encoder(small_spec()), 4);
  save_classifier(dir / "c.ckpt", b);
  save_decoder(dir / "d.ckpt", dec, {{"note", 1}});
  const auto [b2, mb] = load_classifier(dir / "c.ckpt");
  const auto [d2, md] = load_decoder(dir / "d.ckpt");
  CHECK(b2.parameters().hash() == b.parameters().hash());
  CHECK(d2.parameters().hash() == dec.parameters().hash());
  CHECK(md["note"] == 1);
  const auto img = random_image(32, 32, 1);
  CHECK(fcam_inference(b2, d2, img).cam.data == fcam_inference(b, dec, img).cam.data);
}

TEST_CASE("loading a bad checkpoint fails cleanly") {
  const auto dir = temp_dir("decoder_bad");
  CHECK_THROWS(load_decoder(dir / "missing.ckpt"));
  const Decoder dec = Decoder::init(DecoderSpec::for_encoder(small_spec()), 4);
  save_decoder(dir / "d.ckpt", dec);
  std::filesystem::resize_file(dir / "d.ckpt", 20);
  CHECK_THROWS(load_decoder(dir / "d.ckpt"));
  // Shape mismatch against a differently sized set.
  ClassifierSpec other = small_spec();
  other.widths = {4, 8, 16};
  nn::ParameterSet ps = Decoder::init(DecoderSpec::for_encoder(other), 0).parameters();
  save_decoder(dir / "ok.ckpt", dec);
  CHECK_THROWS(load_parameters(dir / "ok.ckpt", ps));
}
