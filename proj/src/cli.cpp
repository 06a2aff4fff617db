#include "fcam/cli.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "fcam/training.hpp"

namespace fcam::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(ExitCode c) {
  switch (c) {
    case ExitCode::ok: return "ok";
    case ExitCode::usage: return "usage";
    case ExitCode::config: return "config";
    case ExitCode::dataset: return "dataset";
    case ExitCode::checkpoint: return "checkpoint";
    case ExitCode::runtime: return "runtime";
  }
  return "runtime";
}

json default_run_config() {
  SyntheticOptions syn;
  TrainConfig train;
  // Desk profile: synthetic 64x64 images, no resize/crop, CRF on a 2x grid.
  train.resize = 64;
  train.crop = 64;
  LossConfig loss;
  loss.crf_downsample = 2;
  const ClassifierSpec spec;
  return {{"dataset",
           {{"root", "data"},
            {"synthetic",
             {{"num_classes", syn.num_classes},
              {"train_per_class", syn.train_per_class},
              {"val_per_class", syn.val_per_class},
              {"test_per_class", syn.test_per_class},
              {"image_size", syn.image_size},
              {"seed", syn.seed},
              {"min_area", syn.min_area},
              {"max_area", syn.max_area}}}}},
          {"model", {{"widths", spec.widths}, {"head", "gap_linear"}}},
          {"train", train.to_json()},
          {"loss", loss.to_json()},
          {"eval", {{"baseline", "gap_cam"}, {"connectivity", 4}, {"split", "test"}}}};
}

namespace {

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

void merge_into(json& base, const json& overlay, const std::string& prefix) {
  if (!overlay.is_object()) throw CliError(ExitCode::config, "config section '" + prefix + "' must be an object");
  for (const auto& [key, value] : overlay.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw CliError(ExitCode::config, "unknown config key: " + path);
    json& slot = base[key];
    if (slot.is_object()) {
      merge_into(slot, value, path);
    } else {
      if (!same_kind(slot, value)) throw CliError(ExitCode::config, "wrong type for config key: " + path);
      if (slot.is_number_integer() && !value.is_number_integer())
        throw CliError(ExitCode::config, "config key " + path + " expects an integer");
      slot = value;
    }
  }
}

}  // namespace

json merge_config(const json& base, const json& overlay) {
  json out = base;
  merge_into(out, overlay, "");
  return out;
}

json apply_override(json config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw CliError(ExitCode::config, "override must look like key=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  // Build a nested overlay from the dotted path.
  json overlay = value;
  std::vector<std::string> parts;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
    if (it->empty()) throw CliError(ExitCode::config, "empty path component in " + key);
    overlay = json{{*it, overlay}};
  }
  return merge_config(config, overlay);
}

void validate_run_config(const json& c) {
  try {
    TrainConfig::from_json(c.at("train")).validate();
    const auto& syn = c.at("dataset").at("synthetic");
    if (syn.at("num_classes").get<int>() < 2) throw std::invalid_argument("dataset.synthetic.num_classes must be >= 2");
    if (syn.at("image_size").get<int>() < 32) throw std::invalid_argument("dataset.synthetic.image_size must be >= 32");
    const auto head = c.at("model").at("head").get<std::string>();
    if (head != "gap_linear" && head != "gmp_linear") throw std::invalid_argument("model.head must be gap_linear or gmp_linear");
    if (c.at("model").at("widths").empty()) throw std::invalid_argument("model.widths must not be empty");
    const int conn = c.at("eval").at("connectivity").get<int>();
    if (conn != 4 && conn != 8) throw std::invalid_argument("eval.connectivity must be 4 or 8");
    split_from_string(c.at("eval").at("split").get<std::string>());
    const LossConfig l = LossConfig::from_json(c.at("loss"));
    if (!(l.t_init > 0.0 && l.t_factor >= 1.0 && l.t_max >= l.t_init))
      throw std::invalid_argument("loss barrier schedule must have t_init > 0, t_factor >= 1, t_max >= t_init");
    if (l.crf_downsample < 0) throw std::invalid_argument("loss.crf_downsample must be >= 0");
  } catch (const CliError&) {
    throw;
  } catch (const std::exception& e) {
    throw CliError(ExitCode::config, e.what());
  }
}

// ---------------------------------------------------------------------------

namespace {

struct Context {
  json config;
  fs::path run_dir;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;
};

void write_json(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << std::setprecision(17) << j.dump(2) << '\n';
}

json read_json(const fs::path& p, ExitCode code) {
  std::ifstream f(p);
  if (!f) throw CliError(code, "cannot read " + p.string());
  const json j = json::parse(f, nullptr, false);
  if (j.is_discarded()) throw CliError(code, "malformed JSON in " + p.string());
  return j;
}

FolderDataset open_dataset(const json& cfg) {
  const fs::path root = cfg.at("dataset").at("root").get<std::string>();
  if (!fs::exists(root / "manifest.json")) throw CliError(ExitCode::dataset, "dataset not found: " + root.string());
  try {
    return FolderDataset::open(root);
  } catch (const DatasetError& e) {
    throw CliError(ExitCode::dataset, e.what());
  }
}

std::vector<SampleRecord> load_split(const FolderDataset& ds, Split s) {
  try {
    return ds.load_all(s);
  } catch (const DatasetError& e) {
    throw CliError(ExitCode::dataset, e.what());
  }
}

ClassifierBundle load_stage1(const fs::path& run) {
  const fs::path p = run / "classifier.ckpt";
  if (!fs::exists(p)) throw CliError(ExitCode::checkpoint, "missing stage-1 checkpoint: " + p.string() + " (run `train` first)");
  try {
    return load_classifier(p).first;
  } catch (const std::exception& e) {
    throw CliError(ExitCode::checkpoint, std::string("unreadable classifier checkpoint: ") + e.what());
  }
}

Decoder load_stage2(const fs::path& run) {
  const fs::path p = run / "decoder.ckpt";
  if (!fs::exists(p)) throw CliError(ExitCode::checkpoint, "missing decoder checkpoint: " + p.string() + " (run `finetune` first)");
  try {
    return load_decoder(p).first;
  } catch (const std::exception& e) {
    throw CliError(ExitCode::checkpoint, std::string("unreadable decoder checkpoint: ") + e.what());
  }
}

BoxEvalOptions box_options(const json& cfg) {
  BoxEvalOptions o;
  o.connectivity = cfg.at("eval").at("connectivity").get<int>() == 8 ? Connectivity::eight : Connectivity::four;
  return o;
}

std::vector<SampleRecord> eval_views_of(const std::vector<SampleRecord>& recs, int size) {
  std::vector<SampleRecord> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back(eval_view(r, size));
  return out;
}

std::string fmt(double v) {
  std::ostringstream o;
  o << std::setprecision(10) << v;
  return o.str();
}

void write_curve_csv(const fs::path& p, const std::vector<std::string>& header,
                     const std::vector<std::vector<double>>& columns) {
  fs::create_directories(p.parent_path());
  std::ofstream f(p);
  for (std::size_t i = 0; i < header.size(); ++i) f << (i ? "," : "") << header[i];
  f << '\n';
  const std::size_t rows = columns.empty() ? 0 : columns[0].size();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < columns.size(); ++c) f << (c ? "," : "") << fmt(columns[c][r]);
    f << '\n';
  }
}

/// Report files: <stem>.json plus curve CSVs next to it.
void write_report(const fs::path& dir, const std::string& stem, const EvalReport& rep, json extra) {
  json j = rep.to_json();
  for (auto& [k, v] : extra.items()) j[k] = v;
  write_json(dir / (stem + ".json"), j);
  std::vector<double> taus(tau_grid().begin(), tau_grid().end());
  std::vector<std::vector<double>> cols{taus};
  std::vector<std::string> header{"tau"};
  for (const auto& [sigma, curve] : rep.box_curves) {
    header.push_back("box_acc_sigma_" + fmt(sigma));
    cols.push_back(curve.scores);
  }
  write_curve_csv(dir / (stem + "_box_curves.csv"), header, cols);
  if (rep.has_pxap)
    write_curve_csv(dir / (stem + "_pr_curve.csv"), {"tau", "precision", "recall"},
                    {taus, rep.pxap_curve.precision, rep.pxap_curve.recall});
  std::vector<double> centers(rep.histogram.size());
  for (std::size_t i = 0; i < centers.size(); ++i) centers[i] = (i + 0.5) / static_cast<double>(centers.size());
  write_curve_csv(dir / (stem + "_histogram.csv"), {"activation", "mass"}, {centers, rep.histogram});
}

float operating_tau_from(const EvalInputs& val, const BoxEvalOptions& opts) {
  const auto r = max_box_acc(val.cams, val.gt_boxes, 0.5, opts);
  return tau_grid()[r.best_tau_index];
}

EvalInputs live_inputs(const ClassifierBundle& bundle, const Decoder* dec, const std::string& method,
                       const std::vector<SampleRecord>& recs, int size) {
  try {
    return build_eval_inputs(bundle, dec, method, eval_views_of(recs, size));
  } catch (const UnsupportedMethodError& e) {
    throw CliError(ExitCode::config, e.what());
  }
}

fs::path cams_dir(const fs::path& run, const std::string& method, Split s) { return run / "cams" / method / to_string(s); }

// Loads rasters written by `infer`; ground truth comes from the dataset.
EvalInputs stored_inputs(const fs::path& dir, const std::vector<SampleRecord>& recs, int size) {
  EvalInputs in;
  const auto views = eval_views_of(recs, size);
  bool masks = !views.empty();
  for (const auto& r : views) masks = masks && r.gt_mask.has_value();
  for (const auto& r : views) {
    const fs::path p = dir / (r.id + ".ras");
    Raster ras;
    try {
      ras = load_raster(p);
    } catch (const std::exception& e) {
      throw CliError(ExitCode::runtime, "cannot load stored CAM for '" + r.id + "': " + e.what());
    }
    in.cams.push_back(cam_from_raster(ras));
    in.class_probs.push_back(ras.sidecar.value("class_probs", std::vector<double>{}));
    in.gt_boxes.push_back(r.gt_boxes);
    in.labels.push_back(r.label);
    if (masks) in.gt_masks.push_back(*r.gt_mask);
  }
  return in;
}

double box_acc_at(const EvalReport& r, double sigma) {
  const auto it = r.max_box_acc.find(sigma);
  return it == r.max_box_acc.end() ? 0.0 : it->second;
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_generate(Context& ctx, const std::string& out_dir, long long seed) {
  json cfg = ctx.config;
  if (seed >= 0) cfg["dataset"]["synthetic"]["seed"] = seed;
  const auto& s = cfg.at("dataset").at("synthetic");
  SyntheticOptions o;
  o.num_classes = s.at("num_classes");
  o.train_per_class = s.at("train_per_class");
  o.val_per_class = s.at("val_per_class");
  o.test_per_class = s.at("test_per_class");
  o.image_size = s.at("image_size");
  o.seed = s.at("seed");
  o.min_area = s.at("min_area");
  o.max_area = s.at("max_area");
  const fs::path root = out_dir.empty() ? fs::path(cfg.at("dataset").at("root").get<std::string>()) : fs::path(out_dir);
  DatasetManifest m;
  try {
    m = generate_synthetic(o, root);
  } catch (const std::invalid_argument& e) {
    throw CliError(ExitCode::config, e.what());
  }
  *ctx.out << json{{"root", root.string()},
                   {"classes", m.class_names},
                   {"train", m.size(Split::train)},
                   {"val", m.size(Split::val)},
                   {"test", m.size(Split::test)}}
                  .dump()
           << '\n';
}

ClassifierSpec classifier_spec(const json& cfg, int num_classes) {
  ClassifierSpec spec;
  spec.num_classes = num_classes;
  spec.widths = cfg.at("model").at("widths").get<std::vector<int>>();
  spec.head = cfg.at("model").at("head") == "gmp_linear" ? HeadKind::gmp_linear : HeadKind::gap_linear;
  return spec;
}

void cmd_train(Context& ctx) {
  const auto ds = open_dataset(ctx.config);
  const TrainConfig tc = TrainConfig::from_json(ctx.config.at("train"));
  const auto train = load_split(ds, Split::train);
  const auto val = load_split(ds, Split::val);
  fs::create_directories(ctx.run_dir / "logs");
  std::ofstream log(ctx.run_dir / "logs" / "stage1.jsonl");
  auto bundle = ClassifierBundle::create(classifier_spec(ctx.config, ds.num_classes()), tc.seed);
  Stage1Result r = train_classifier(std::move(bundle), train, val, tc, &log);
  json ck = json::array();
  for (const auto& c : r.checkpoints) ck.push_back(c.to_json());
  save_classifier(ctx.run_dir / "classifier.ckpt", r.bundle,
                  {{"epoch", r.selected.epoch},
                   {"metric", tc.selection_metric},
                   {"val_localization", r.selected.val_localization},
                   {"val_accuracy", r.selected.val_accuracy},
                   {"param_hash", r.bundle.parameters().hash()}});
  write_json(ctx.run_dir / "checkpoints_stage1.json", ck);
  *ctx.out << json{{"stage", 1}, {"selected", r.selected.to_json()}}.dump() << '\n';
}

Decoder fresh_decoder(const ClassifierBundle& b, const TrainConfig& tc) {
  return Decoder::init(DecoderSpec::for_encoder(b.spec()), tc.seed + 1);
}

void cmd_finetune(Context& ctx) {
  const ClassifierBundle bundle = load_stage1(ctx.run_dir);
  const auto ds = open_dataset(ctx.config);
  const TrainConfig tc = TrainConfig::from_json(ctx.config.at("train"));
  const LossConfig lc = LossConfig::from_json(ctx.config.at("loss"));
  const auto train = load_split(ds, Split::train);
  const auto val = load_split(ds, Split::val);
  fs::create_directories(ctx.run_dir / "logs");
  std::ofstream log(ctx.run_dir / "logs" / "stage2.jsonl");
  const std::uint64_t before = bundle.parameters().hash();
  Stage2Result r = finetune_decoder(bundle, fresh_decoder(bundle, tc), train, val, tc, lc, &log);
  json ck = json::array();
  for (const auto& c : r.checkpoints) ck.push_back(c.to_json());
  save_decoder(ctx.run_dir / "decoder.ckpt", r.decoder,
               {{"epoch", r.selected.epoch},
                {"metric", tc.selection_metric},
                {"val_localization", r.selected.val_localization},
                {"classifier_hash", before}});
  write_json(ctx.run_dir / "checkpoints_stage2.json", ck);
  *ctx.out << json{{"stage", 2},
                   {"selected", r.selected.to_json()},
                   {"classifier_hash_unchanged", bundle.parameters().hash() == before}}
                  .dump()
           << '\n';
}

void cmd_infer(Context& ctx, const std::string& method, Split split) {
  const ClassifierBundle bundle = load_stage1(ctx.run_dir);
  std::optional<Decoder> dec;
  if (method == "fcam") dec = load_stage2(ctx.run_dir);
  const auto ds = open_dataset(ctx.config);
  const int size = ctx.config.at("train").at("crop");
  const auto recs = eval_views_of(load_split(ds, split), size);
  const CamRegistry registry;
  if (method != "fcam" && !registry.contains(method)) throw CliError(ExitCode::config, "unknown CAM method: " + method);
  const fs::path dir = cams_dir(ctx.run_dir, method, split);
  fs::create_directories(dir);
  std::ofstream preds(dir / "predictions.jsonl");
  for (const auto& r : recs) {
    Cam cam;
    std::vector<double> probs;
    if (dec) {
      FcamOutput o = fcam_inference(bundle, *dec, r.image);
      cam = std::move(o.cam);
      probs = std::move(o.probs);
    } else {
      cam = full_resolution_cam(registry.get(method), bundle, r.image, r.label);
      probs = forward_classify(bundle, r.image);
    }
    Raster ras = to_raster(cam, r.label);
    ras.sidecar["id"] = r.id;
    ras.sidecar["method"] = method;
    ras.sidecar["class_probs"] = probs;
    save_raster(dir / (r.id + ".ras"), ras);
    preds << json{{"id", r.id}, {"label", r.label}, {"predicted", argmax(probs)}, {"class_probs", probs}}.dump() << '\n';
  }
  *ctx.out << json{{"method", method}, {"split", to_string(split)}, {"count", recs.size()}, {"dir", dir.string()}}.dump()
           << '\n';
}

void cmd_eval(Context& ctx, const std::string& method, Split split, bool from_cams) {
  const auto ds = open_dataset(ctx.config);
  const int size = ctx.config.at("train").at("crop");
  const BoxEvalOptions opts = box_options(ctx.config);
  const auto recs = load_split(ds, split);
  EvalInputs in;
  std::optional<EvalInputs> val;
  if (from_cams) {
    const fs::path dir = cams_dir(ctx.run_dir, method, split);
    if (!fs::exists(dir)) throw CliError(ExitCode::runtime, "no stored CAMs at " + dir.string() + " (run `infer` first)");
    in = stored_inputs(dir, recs, size);
    const fs::path vdir = cams_dir(ctx.run_dir, method, Split::val);
    if (split != Split::val && fs::exists(vdir)) val = stored_inputs(vdir, load_split(ds, Split::val), size);
  } else {
    const ClassifierBundle bundle = load_stage1(ctx.run_dir);
    std::optional<Decoder> dec;
    if (method == "fcam") dec = load_stage2(ctx.run_dir);
    in = live_inputs(bundle, dec ? &*dec : nullptr, method, recs, size);
    if (split != Split::val && ds.size(Split::val) > 0)
      val = live_inputs(bundle, dec ? &*dec : nullptr, method, load_split(ds, Split::val), size);
  }
  bool has_probs = true;
  for (const auto& p : in.class_probs) has_probs = has_probs && !p.empty();
  if (!has_probs) in.class_probs.clear();
  const float tau = val ? operating_tau_from(*val, opts) : -1.0f;
  const EvalReport rep = evaluate(in, tau, opts);
  const std::string stem = method + "_" + to_string(split);
  write_report(ctx.run_dir / "reports", stem, rep,
               {{"method", method},
                {"split", to_string(split)},
                {"operating_tau_source", val ? "val" : "self"},
                {"tau_width_0.9", robust_tau_width(rep.box_curves.at(0.5), 0.9)},
                {"mass_between_0.2_0.8", activation_mass_between(in.cams, 0.2, 0.8)}});
  *ctx.out << json{{"method", method},
                   {"split", to_string(split)},
                   {"pxap", rep.pxap},
                   {"max_box_acc_0.5", box_acc_at(rep, 0.5)},
                   {"max_box_acc_v2", rep.max_box_acc_v2},
                   {"top1_loc", rep.top1_loc},
                   {"top5_loc", rep.top5_loc}}
                  .dump()
           << '\n';
}

void cmd_sweep(Context& ctx, const std::string& what) {
  const auto ds = open_dataset(ctx.config);
  const ClassifierBundle bundle = load_stage1(ctx.run_dir);
  const TrainConfig tc = TrainConfig::from_json(ctx.config.at("train"));
  const LossConfig lc = LossConfig::from_json(ctx.config.at("loss"));
  const fs::path dir = ctx.run_dir / "sweeps";
  if (what == "tau") {
    const BoxEvalOptions opts = box_options(ctx.config);
    const Split split = split_from_string(ctx.config.at("eval").at("split"));
    const auto recs = load_split(ds, split);
    std::vector<std::string> methods{ctx.config.at("eval").at("baseline").get<std::string>()};
    std::optional<Decoder> dec;
    if (fs::exists(ctx.run_dir / "decoder.ckpt")) {
      dec = load_stage2(ctx.run_dir);
      methods.push_back("fcam");
    }
    json summary = json::object();
    for (const auto& m : methods) {
      const EvalInputs in = live_inputs(bundle, dec ? &*dec : nullptr, m, recs, tc.crop);
      const auto table = box_iou_table(in.cams, in.gt_boxes, opts);
      std::vector<std::vector<double>> cols{std::vector<double>(tau_grid().begin(), tau_grid().end())};
      std::vector<std::string> header{"tau"};
      json widths = json::object();
      for (double sigma : kV2Sigmas) {
        const auto r = max_box_acc_from_table(table, sigma);
        header.push_back("box_acc_sigma_" + fmt(sigma));
        cols.push_back(r.curve.scores);
        widths[fmt(sigma)] = {{"max", r.score}, {"best_tau", r.curve.taus[r.best_tau_index]},
                              {"width_0.9", robust_tau_width(r.curve, 0.9)}};
      }
      write_curve_csv(dir / ("tau_" + m + ".csv"), header, cols);
      summary[m] = widths;
    }
    write_json(dir / "tau_summary.json", summary);
    *ctx.out << summary.dump() << '\n';
  } else if (what == "n_minus") {
    const auto train = load_split(ds, Split::train);
    const auto val = load_split(ds, Split::val);
    fs::create_directories(ctx.run_dir / "logs");
    std::ofstream log(ctx.run_dir / "logs" / "sweep_n_minus.jsonl");
    const GridSearchResult g = grid_search(bundle, fresh_decoder(bundle, tc), train, val, tc, lc, &log);
    std::vector<double> nm, al, score;
    json rows = json::array();
    for (const auto& p : g.points) {
      nm.push_back(p.n_minus);
      al.push_back(p.alpha);
      score.push_back(p.val_localization);
      rows.push_back({{"n_minus", p.n_minus}, {"alpha", p.alpha}, {"val_localization", p.val_localization},
                      {"selected_epoch", p.selected.epoch}});
    }
    write_curve_csv(dir / "n_minus.csv", {"n_minus", "alpha", "val_localization"}, {nm, al, score});
    const json summary{{"points", rows}, {"best", rows[g.best]}};
    write_json(dir / "n_minus.json", summary);
    save_decoder(dir / "best_decoder.ckpt", g.decoder, {{"n_minus", g.points[g.best].n_minus}, {"alpha", g.points[g.best].alpha}});
    *ctx.out << summary.dump() << '\n';
  } else {
    throw CliError(ExitCode::usage, "sweep --what must be tau or n_minus");
  }
}

void cmd_ablate(Context& ctx) {
  const auto ds = open_dataset(ctx.config);
  const ClassifierBundle bundle = load_stage1(ctx.run_dir);
  const TrainConfig tc = TrainConfig::from_json(ctx.config.at("train"));
  const LossConfig base = LossConfig::from_json(ctx.config.at("loss"));
  const BoxEvalOptions opts = box_options(ctx.config);
  const Split split = split_from_string(ctx.config.at("eval").at("split"));
  const std::string baseline = ctx.config.at("eval").at("baseline");
  const auto train = load_split(ds, Split::train);
  const auto val = load_split(ds, Split::val);
  const auto test = load_split(ds, split);
  fs::create_directories(ctx.run_dir / "logs");
  std::ofstream log(ctx.run_dir / "logs" / "ablate.jsonl");

  struct Row {
    std::string name;
    EvalReport rep;
  };
  std::vector<Row> rows;
  auto score = [&](const Decoder* dec, const std::string& method) {
    const EvalInputs vin = live_inputs(bundle, dec, method, val, tc.crop);
    const float tau = vin.cams.empty() ? -1.0f : operating_tau_from(vin, opts);
    return evaluate(live_inputs(bundle, dec, method, test, tc.crop), tau, opts);
  };
  rows.push_back({"baseline", score(nullptr, baseline)});
  const std::vector<std::pair<std::string, std::array<bool, 3>>> variants{
      {"+SR", {true, false, false}}, {"+SR+CRF", {true, true, false}}, {"+SR+CRF+ASC", {true, true, true}}};
  for (const auto& [name, flags] : variants) {
    LossConfig l = base;
    l.use_sr = flags[0];
    l.use_crf = flags[1];
    l.use_asc = flags[2];
    const Stage2Result r = finetune_decoder(bundle, fresh_decoder(bundle, tc), train, val, tc, l, &log);
    rows.push_back({name, score(&r.decoder, "fcam")});
  }
  json table = json::array();
  std::vector<std::string> names;
  std::ostringstream csv;
  csv << "row,pxap,max_box_acc_0.5,max_box_acc_v2,top1_loc,delta_pxap,delta_max_box_acc_0.5\n";
  const EvalReport& b = rows.front().rep;
  for (const auto& r : rows) {
    const double dp = r.rep.pxap - b.pxap;
    const double db = box_acc_at(r.rep, 0.5) - box_acc_at(b, 0.5);
    table.push_back({{"row", r.name},
                     {"pxap", r.rep.pxap},
                     {"max_box_acc_0.5", box_acc_at(r.rep, 0.5)},
                     {"max_box_acc_v2", r.rep.max_box_acc_v2},
                     {"top1_loc", r.rep.top1_loc},
                     {"delta_pxap", dp},
                     {"delta_max_box_acc_0.5", db}});
    csv << r.name << ',' << fmt(r.rep.pxap) << ',' << fmt(box_acc_at(r.rep, 0.5)) << ',' << fmt(r.rep.max_box_acc_v2)
        << ',' << fmt(r.rep.top1_loc) << ',' << fmt(dp) << ',' << fmt(db) << '\n';
  }
  write_json(ctx.run_dir / "ablation.json", table);
  std::ofstream(ctx.run_dir / "ablation.csv") << csv.str();
  *ctx.out << csv.str();
}

// Minimal line chart: first CSV column on x, the others as series.
std::string svg_chart(const std::string& title, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& cols) {
  constexpr double W = 640, H = 400, L = 60, R = 20, T = 40, B = 50;
  const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (!cols.empty() && !cols[0].empty()) {
    xmin = *std::min_element(cols[0].begin(), cols[0].end());
    xmax = *std::max_element(cols[0].begin(), cols[0].end());
    ymin = 0.0;
    ymax = 0.0;
    for (std::size_t c = 1; c < cols.size(); ++c)
      for (double v : cols[c]) ymax = std::max(ymax, v);
    if (ymax <= 0.0) ymax = 1.0;
    if (xmax <= xmin) xmax = xmin + 1.0;
  }
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" << title
    << "</text>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fx = xmin + (xmax - xmin) * i / 4.0, fy = ymin + (ymax - ymin) * i / 4.0;
    s << "<text x=\"" << px(fx) << "\" y=\"" << H - B + 18 << "\" text-anchor=\"middle\" font-size=\"11\" "
      << "font-family=\"sans-serif\">" << fmt(fx) << "</text>\n";
    s << "<text x=\"" << L - 6 << "\" y=\"" << py(fy) + 4 << "\" text-anchor=\"end\" font-size=\"11\" "
      << "font-family=\"sans-serif\">" << fmt(fy) << "</text>\n";
  }
  s << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\" font-size=\"12\" "
    << "font-family=\"sans-serif\">" << (header.empty() ? "" : header[0]) << "</text>\n";
  for (std::size_t c = 1; c < cols.size(); ++c) {
    s << "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" << palette[(c - 1) % 6] << "\" points=\"";
    for (std::size_t i = 0; i < cols[c].size(); ++i) s << px(cols[0][i]) << ',' << py(cols[c][i]) << ' ';
    s << "\"/>\n";
    s << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 * c << "\" text-anchor=\"end\" font-size=\"11\" "
      << "font-family=\"sans-serif\" fill=\"" << palette[(c - 1) % 6] << "\">" << header[c] << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

void cmd_plot(Context& ctx) {
  std::vector<fs::path> csvs;
  for (const char* sub : {"reports", "sweeps"}) {
    const fs::path d = ctx.run_dir / sub;
    if (!fs::exists(d)) continue;
    for (const auto& e : fs::directory_iterator(d))
      if (e.path().extension() == ".csv") csvs.push_back(e.path());
  }
  std::sort(csvs.begin(), csvs.end());
  if (csvs.empty()) throw CliError(ExitCode::runtime, "nothing to plot: run eval or sweep first");
  const fs::path out = ctx.run_dir / "plots";
  fs::create_directories(out);
  json emitted = json::array();
  for (const auto& p : csvs) {
    std::ifstream f(p);
    std::string line;
    std::getline(f, line);
    std::vector<std::string> header;
    std::stringstream hs(line);
    for (std::string h; std::getline(hs, h, ',');) header.push_back(h);
    std::vector<std::vector<double>> cols(header.size());
    bool numeric = true;
    while (std::getline(f, line) && numeric) {
      std::stringstream ls(line);
      std::size_t c = 0;
      for (std::string v; std::getline(ls, v, ',') && c < cols.size(); ++c) {
        try {
          cols[c].push_back(std::stod(v));
        } catch (const std::exception&) {
          numeric = false;
        }
      }
    }
    if (!numeric) continue;  // tables such as the ablation summary
    const fs::path svg = out / (p.stem().string() + ".svg");
    std::ofstream(svg) << svg_chart(p.stem().string(), header, cols);
    fs::copy_file(p, out / p.filename(), fs::copy_options::overwrite_existing);
    emitted.push_back(svg.string());
  }
  *ctx.out << json{{"plots", emitted}}.dump() << '\n';
}

json load_config(const fs::path& run_dir, const std::string& config_file, const std::vector<std::string>& sets) {
  json cfg = default_run_config();
  if (!run_dir.empty() && fs::exists(run_dir / "config.json"))
    cfg = merge_config(cfg, read_json(run_dir / "config.json", ExitCode::config));
  if (!config_file.empty()) cfg = merge_config(cfg, read_json(config_file, ExitCode::config));
  for (const auto& s : sets) cfg = apply_override(cfg, s);
  validate_run_config(cfg);
  return cfg;
}

void emit_error(std::ostream& err, ExitCode code, const std::string& msg) {
  err << json{{"error", {{"code", static_cast<int>(code)}, {"kind", to_string(code)}, {"message", msg}}}}.dump() << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Full-resolution class activation maps: training, inference and WSOL evaluation", "fcam"};
  app.require_subcommand(1);
  std::string config_file;
  std::vector<std::string> sets;
  std::string run_dir = "run";
  auto add_common = [&](CLI::App* sub, bool needs_run) {
    sub->add_option("--config", config_file, "JSON run configuration overlaid on the defaults");
    sub->add_option("--set", sets, "Override a config value, e.g. --set train.lr=0.02 (repeatable)");
    if (needs_run) sub->add_option("--run", run_dir, "Run directory")->capture_default_str();
  };

  std::string gen_out;
  long long gen_seed = -1;
  auto* gen = app.add_subcommand("generate", "Write the synthetic shapes dataset");
  add_common(gen, false);
  gen->add_option("--out", gen_out, "Dataset root (default: dataset.root)");
  gen->add_option("--seed", gen_seed, "Generator seed (default: dataset.synthetic.seed)");

  auto* train = app.add_subcommand("train", "Stage 1: train the classifier on image labels");
  add_common(train, true);
  auto* finetune = app.add_subcommand("finetune", "Stage 2: freeze the classifier and train the decoder");
  add_common(finetune, true);

  std::string method = "fcam", split_name = "test";
  auto* infer = app.add_subcommand("infer", "Write localization maps as raster files");
  add_common(infer, true);
  infer->add_option("--method", method, "fcam, gap_cam, grad_cam or center_baseline")->capture_default_str();
  infer->add_option("--split", split_name, "train, val or test")->capture_default_str();

  bool from_cams = false;
  auto* eval = app.add_subcommand("eval", "Compute MaxBoxAcc, top-k localization, PxAP and histograms");
  add_common(eval, true);
  eval->add_option("--method", method, "fcam, gap_cam, grad_cam or center_baseline")->capture_default_str();
  eval->add_option("--split", split_name, "train, val or test")->capture_default_str();
  eval->add_flag("--from-cams", from_cams, "Evaluate maps stored by `infer` instead of recomputing them");

  std::string what = "tau";
  auto* sweep = app.add_subcommand("sweep", "Threshold curves (tau) or the n_minus x alpha grid search");
  add_common(sweep, true);
  sweep->add_option("--what", what, "tau or n_minus")->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "Train decoders with SR, SR+CRF, SR+CRF+ASC and tabulate");
  add_common(ablate, true);
  auto* plot = app.add_subcommand("plot", "Emit SVG charts and CSVs from reports and sweeps");
  add_common(plot, true);

  std::vector<std::string> argv_store{"fcam"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    emit_error(err, ExitCode::usage, e.what());
    return static_cast<int>(ExitCode::usage);
  }

  try {
    Context ctx;
    ctx.out = &out;
    ctx.err = &err;
    const bool uses_run = !gen->parsed();
    ctx.run_dir = uses_run ? fs::path(run_dir) : fs::path();
    ctx.config = load_config(ctx.run_dir, config_file, sets);
    Split split = Split::test;
    try {
      split = split_from_string(split_name);
    } catch (const std::invalid_argument& e) {
      throw CliError(ExitCode::usage, e.what());
    }
    if (train->parsed() || finetune->parsed() || ablate->parsed() || sweep->parsed()) {
      fs::create_directories(ctx.run_dir);
      write_json(ctx.run_dir / "config.json", ctx.config);
    }
    if (gen->parsed()) cmd_generate(ctx, gen_out, gen_seed);
    else if (train->parsed()) cmd_train(ctx);
    else if (finetune->parsed()) cmd_finetune(ctx);
    else if (infer->parsed()) cmd_infer(ctx, method, split);
    else if (eval->parsed()) cmd_eval(ctx, method, split, from_cams);
    else if (sweep->parsed()) cmd_sweep(ctx, what);
    else if (ablate->parsed()) cmd_ablate(ctx);
    else if (plot->parsed()) cmd_plot(ctx);
    return 0;
  } catch (const CliError& e) {
    emit_error(err, e.code(), e.what());
    return static_cast<int>(e.code());
  } catch (const DatasetError& e) {
    emit_error(err, ExitCode::dataset, e.what());
    return static_cast<int>(ExitCode::dataset);
  } catch (const std::exception& e) {
    emit_error(err, ExitCode::runtime, e.what());
    return static_cast<int>(ExitCode::runtime);
  }
}

}  // namespace fcam::cli
