#include "fcam/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace fcam {

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split: " + s);
}

std::size_t DatasetManifest::size(Split s) const {
  const auto it = splits.find(s);
  return it == splits.end() ? 0 : it->second.size();
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json j;
  j["format"] = "fcam-folder-v1";
  j["classes"] = class_names;
  nlohmann::json sp = nlohmann::json::object();
  for (const auto& [s, _] : splits) sp[to_string(s)] = to_string(s) + ".txt";
  j["splits"] = sp;
  return j;
}

std::string format_annotation(const AnnotationEntry& e) {
  std::ostringstream o;
  o << e.id << '\t' << e.image_path << '\t' << e.label << '\t';
  for (std::size_t i = 0; i < e.boxes.size(); ++i) {
    if (i) o << ';';
    const auto& b = e.boxes[i];
    o << b.x0 << ' ' << b.y0 << ' ' << b.x1 << ' ' << b.y1;
  }
  o << '\t' << (e.mask_path.empty() ? "-" : e.mask_path);
  return o.str();
}

AnnotationEntry parse_annotation(const std::string& line) {
  std::vector<std::string> cols;
  std::string col;
  std::istringstream in(line);
  while (std::getline(in, col, '\t')) cols.push_back(col);
  const std::string id = cols.empty() ? std::string() : cols[0];
  if (cols.size() != 5) throw DatasetError(id, "expected 5 tab-separated columns, got " + std::to_string(cols.size()));
  AnnotationEntry e;
  e.id = cols[0];
  e.image_path = cols[1];
  try {
    std::size_t used = 0;
    e.label = std::stoi(cols[2], &used);
    if (used != cols[2].size()) throw std::invalid_argument("trailing characters");
  } catch (const std::exception&) {
    throw DatasetError(id, "malformed label '" + cols[2] + "'");
  }
  std::istringstream boxes(cols[3]);
  std::string group;
  while (std::getline(boxes, group, ';')) {
    std::istringstream g(group);
    BoundingBox b;
    std::string rest;
    if (!(g >> b.x0 >> b.y0 >> b.x1 >> b.y1) || (g >> rest))
      throw DatasetError(id, "malformed box '" + group + "'");
    if (b.x1 < b.x0 || b.y1 < b.y0) throw DatasetError(id, "box with negative extent");
    e.boxes.push_back(b);
  }
  if (e.boxes.empty()) throw DatasetError(id, "no bounding box");
  if (cols[4] != "-") e.mask_path = cols[4];
  return e;
}

DatasetManifest read_manifest(const std::filesystem::path& root) {
  const auto mpath = root / "manifest.json";
  std::ifstream f(mpath);
  if (!f) throw DatasetError("", "dataset manifest not found: " + mpath.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const std::exception& e) {
    throw DatasetError("", std::string("malformed manifest: ") + e.what());
  }
  DatasetManifest m;
  m.root = root;
  m.class_names = j.at("classes").get<std::vector<std::string>>();
  for (const auto& [name, file] : j.at("splits").items()) {
    const Split s = split_from_string(name);
    std::ifstream a(root / file.get<std::string>());
    if (!a) throw DatasetError("", "annotation file missing: " + (root / file.get<std::string>()).string());
    auto& entries = m.splits[s];
    std::string line;
    while (std::getline(a, line)) {
      if (line.empty() || line[0] == '#') continue;
      entries.push_back(parse_annotation(line));
      if (entries.back().label < 0 || entries.back().label >= static_cast<int>(m.class_names.size()))
        throw DatasetError(entries.back().id, "label out of range");
    }
  }
  return m;
}

void write_manifest(const DatasetManifest& m) {
  std::filesystem::create_directories(m.root);
  {
    std::ofstream f(m.root / "manifest.json");
    f << m.to_json().dump(2) << '\n';
  }
  for (const auto& [s, entries] : m.splits) {
    std::ofstream a(m.root / (to_string(s) + ".txt"));
    for (const auto& e : entries) a << format_annotation(e) << '\n';
  }
}

FolderDataset::FolderDataset(DatasetManifest manifest) : manifest_(std::move(manifest)) {
  // Ids must be unique across splits.
  std::vector<std::string> ids;
  for (const auto& [_, entries] : manifest_.splits)
    for (const auto& e : entries) ids.push_back(e.id);
  std::sort(ids.begin(), ids.end());
  const auto dup = std::adjacent_find(ids.begin(), ids.end());
  if (dup != ids.end()) throw DatasetError(*dup, "id appears more than once");
}

FolderDataset FolderDataset::open(const std::filesystem::path& root) { return FolderDataset(read_manifest(root)); }

SampleRecord FolderDataset::load(Split s, std::size_t index) const {
  const auto it = manifest_.splits.find(s);
  if (it == manifest_.splits.end() || index >= it->second.size()) throw std::out_of_range("record index out of range");
  const AnnotationEntry& e = it->second[index];
  SampleRecord r;
  r.id = e.id;
  r.label = e.label;
  r.split = s;
  r.gt_boxes = e.boxes;
  try {
    const auto ext = std::filesystem::path(e.image_path).extension();
    if (ext != ".ras") throw std::runtime_error("unsupported image format '" + ext.string() + "' (raster files only)");
    r.image = image_from_raster(load_raster(manifest_.root / e.image_path));
    r.image.validate();
    if (!e.mask_path.empty()) {
      const Raster m = load_raster(manifest_.root / e.mask_path);
      if (m.channels != 1 || static_cast<int>(m.height) != r.image.height() || static_cast<int>(m.width) != r.image.width())
        throw std::runtime_error("mask shape does not match image");
      BinaryMask mask(m.payload.size());
      for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = m.payload[i] > 0.5f ? 1 : 0;
      r.gt_mask = std::move(mask);
    }
  } catch (const DatasetError&) {
    throw;
  } catch (const std::exception& ex) {
    throw DatasetError(e.id, ex.what());
  }
  for (const auto& b : r.gt_boxes) {
    if (b.x0 < 0 || b.y0 < 0 || b.x1 > r.image.width() || b.y1 > r.image.height())
      throw DatasetError(e.id, "box outside the image");
  }
  return r;
}

std::vector<SampleRecord> FolderDataset::load_all(Split s) const {
  std::vector<SampleRecord> out;
  out.reserve(size(s));
  for (std::size_t i = 0; i < size(s); ++i) out.push_back(load(s, i));
  return out;
}

// ---------------------------------------------------------------------------

std::pair<int, int> synthetic_class(int k) {
  const int ns = static_cast<int>(kShapeNames.size());
  const int nc = static_cast<int>(kColorNames.size());
  if (k < 0 || k >= ns * nc) throw std::invalid_argument("synthetic class id exceeds shape x color combinations");
  return {k % ns, (k % ns + k / ns) % nc};
}

std::string synthetic_class_name(int k) {
  const auto [s, c] = synthetic_class(k);
  return kColorNames[c] + "_" + kShapeNames[s];
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

constexpr float kBaseColors[4][3] = {{0.85f, 0.15f, 0.15f}, {0.15f, 0.75f, 0.2f}, {0.15f, 0.25f, 0.9f}, {0.9f, 0.85f, 0.1f}};

}  // namespace

SampleRecord render_synthetic_sample(int label, int image_size, double min_area, double max_area, std::uint64_t seed) {
  if (image_size < 32) throw std::invalid_argument("synthetic images must be at least 32 pixels");
  if (!(min_area > 0.0 && min_area <= max_area && max_area < 1.0)) throw std::invalid_argument("bad area range");
  const auto [shape, color] = synthetic_class(label);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<float> noise(0.0f, 1.0f);
  const int n = image_size;
  const double npx = static_cast<double>(n) * n;

  // Object mask; redraw until the rasterized area lands in range.
  BinaryMask mask;
  for (int attempt = 0;; ++attempt) {
    if (attempt > 1000) throw std::runtime_error("could not place synthetic object");
    const double area = min_area + (max_area - min_area) * u01(rng);
    double half_w = 0.0, half_h = 0.0;
    if (shape == 0) half_w = half_h = std::sqrt(area * npx / M_PI);
    else if (shape == 1) half_w = half_h = std::sqrt(area * npx) / 2.0;
    else half_w = half_h = std::sqrt(2.0 * area * npx) / 2.0;
    if (2.0 * half_w > n - 2 || 2.0 * half_h > n - 2) continue;
    const double cx = half_w + 1.0 + u01(rng) * (n - 2.0 - 2.0 * half_w);
    const double cy = half_h + 1.0 + u01(rng) * (n - 2.0 - 2.0 * half_h);
    mask.assign(static_cast<std::size_t>(n) * n, 0);
    std::size_t count = 0;
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        const double px = x + 0.5 - cx, py = y + 0.5 - cy;
        bool in = false;
        if (shape == 0) {
          in = px * px + py * py <= half_w * half_w;
        } else if (shape == 1) {
          in = std::abs(px) <= half_w && std::abs(py) <= half_h;
        } else {
          // Upright isosceles triangle: apex at top, base at bottom.
          const double t = (py + half_h) / (2.0 * half_h);
          in = t >= 0.0 && t <= 1.0 && std::abs(px) <= t * half_w;
        }
        if (in) {
          mask[static_cast<std::size_t>(y) * n + x] = 1;
          ++count;
        }
      }
    }
    const double frac = static_cast<double>(count) / npx;
    if (frac >= min_area && frac <= max_area) break;
  }

  // Low-frequency background: a coarse grid of muted tinted grays upsampled.
  constexpr int kGrid = 4;
  std::vector<float> coarse(3 * kGrid * kGrid);
  for (int cell = 0; cell < kGrid * kGrid; ++cell) {
    const double gray = 0.3 + 0.4 * u01(rng);
    for (int c = 0; c < 3; ++c) coarse[c * kGrid * kGrid + cell] = static_cast<float>(gray + 0.12 * (u01(rng) - 0.5));
  }
  ImageTensor img(n, n);
  float obj[3];
  for (int c = 0; c < 3; ++c) obj[c] = kBaseColors[color][c] + static_cast<float>(0.16 * (u01(rng) - 0.5));
  for (int c = 0; c < 3; ++c) {
    const auto bg = resize_plane(std::span<const float>(coarse.data() + c * kGrid * kGrid, kGrid * kGrid), kGrid, kGrid, n, n);
    for (std::size_t p = 0; p < bg.size(); ++p) {
      const float base = mask[p] ? obj[c] : bg[p];
      img.data()[c * img.plane_size() + p] = std::clamp(base + 0.03f * noise(rng), 0.0f, 1.0f);
    }
  }

  SampleRecord r;
  r.image = std::move(img);
  r.label = label;
  r.gt_boxes = {tight_box(mask, n, n)};
  r.gt_mask = std::move(mask);
  return r;
}

DatasetManifest generate_synthetic(const SyntheticOptions& opts, const std::filesystem::path& root) {
  if (opts.num_classes < 2) throw std::invalid_argument("synthetic dataset needs at least 2 classes");
  synthetic_class(opts.num_classes - 1);  // throws when too many classes
  DatasetManifest m;
  m.root = root;
  for (int k = 0; k < opts.num_classes; ++k) m.class_names.push_back(synthetic_class_name(k));
  std::filesystem::create_directories(root / "images");
  std::filesystem::create_directories(root / "masks");
  const std::pair<Split, int> plan[] = {
      {Split::train, opts.train_per_class}, {Split::val, opts.val_per_class}, {Split::test, opts.test_per_class}};
  for (const auto& [split, per_class] : plan) {
    auto& entries = m.splits[split];
    for (int i = 0; i < per_class; ++i) {
      for (int k = 0; k < opts.num_classes; ++k) {
        const std::uint64_t s =
            splitmix64(opts.seed ^ splitmix64((static_cast<std::uint64_t>(split) << 40) ^ (static_cast<std::uint64_t>(k) << 24) ^ i));
        SampleRecord r = render_synthetic_sample(k, opts.image_size, opts.min_area, opts.max_area, s);
        char id[64];
        std::snprintf(id, sizeof(id), "%s_%02d_%04d", to_string(split).c_str(), k, i);
        AnnotationEntry e{id, std::string("images/") + id + ".ras", k, r.gt_boxes, std::string("masks/") + id + ".ras"};
        Raster img = to_raster(r.image);
        img.sidecar["id"] = e.id;
        save_raster(root / e.image_path, img);
        Raster mk{1, static_cast<std::uint32_t>(opts.image_size), static_cast<std::uint32_t>(opts.image_size), {}, {}};
        mk.payload.assign(r.gt_mask->begin(), r.gt_mask->end());
        mk.sidecar = {{"kind", "gt_mask"}, {"id", e.id}};
        save_raster(root / e.mask_path, mk);
        entries.push_back(std::move(e));
      }
    }
  }
  write_manifest(m);
  return m;
}

}  // namespace fcam
