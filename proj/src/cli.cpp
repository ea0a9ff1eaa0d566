#include "ulip/cli.hpp"

#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "ulip/binio.hpp"
#include "ulip/config.hpp"
#include "ulip/digest.hpp"
#include "ulip/embedstore.hpp"
#include "ulip/errors.hpp"
#include "ulip/eval.hpp"
#include "ulip/geometry.hpp"
#include "ulip/gradcheck_suite.hpp"
#include "ulip/synth.hpp"

namespace ulip::cli {

namespace fs = std::filesystem;
using config::Json;

namespace {

std::filesystem::path json_path(const Json& j, const char* key, const std::string& section) {
  if (!j.at(key).is_string()) {
    throw ConfigError("run config: " + section + "." + key + " must be a string");
  }
  return j.at(key).get<std::string>();
}

void require_file(const std::optional<fs::path>& p, const std::string& what) {
  if (!p) throw ConfigError("no " + what + " given (flag or run config)");
  if (!fs::is_regular_file(*p)) throw DataError("missing " + what + ": " + p->string());
}

void write_text(const fs::path& path, const std::string& text) {
  binio::write_file_atomic(
      path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

std::string wall_clock() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Options shared by every subcommand.
struct Common {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  std::optional<std::string> output;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON run configuration file");
  app->add_option("--seed", c.seed, "Random seed (overrides the run config)");
  app->add_option("--workers", c.workers, "Worker threads for batch assembly (default 1)");
  app->add_option("--output", c.output, "Output directory (overrides the run config)");
}

RunConfig resolve(const Common& c) {
  RunConfig rc = c.config ? load_run_config(*c.config) : RunConfig{};
  if (c.seed) rc.train.seed = *c.seed;
  if (c.workers) rc.train.batch.workers = *c.workers;
  if (c.output) rc.output = *c.output;
  return rc;
}

struct LoadedData {
  embedstore::TripletManifest manifest;
  fs::path base;
};

LoadedData load_manifest(const fs::path& path) {
  return {embedstore::read_manifest(path), path.parent_path()};
}

struct Encoded {
  ag::Tensor features;
  std::vector<std::uint32_t> labels;
  std::vector<geometry::PointCloud> clouds;
};

Encoded encode_manifest(const training::Checkpoint& ckpt, const LoadedData& data,
                        bool need_labels) {
  training::CloudStore store(data.base);
  Encoded e;
  for (const auto& s : data.manifest.shapes) {
    if (need_labels && !s.label) throw DataError("shape '" + s.shape_id + "' has no label");
    if (s.label) e.labels.push_back(*s.label);
    e.clouds.push_back(training::fit_budget(store.get(s), ckpt.train.batch.point_budget,
                                            ckpt.train.batch.subsample));
  }
  e.features = model::encode(ckpt.params, ckpt.encoder, e.clouds);
  return e;
}

eval::LabelEmbeddings load_labels(const RunConfig& rc) {
  require_file(rc.labels, "label table");
  eval::LabelEmbeddings labels;
  labels.table = embedstore::read_table(*rc.labels);
  if (rc.label_names) {
    require_file(rc.label_names, "label names");
    labels.names = read_lines(*rc.label_names);
    if (labels.names.size() != labels.count()) {
      throw DataError(rc.label_names->string() + ": " + std::to_string(labels.names.size()) +
                      " names for " + std::to_string(labels.count()) + " label rows");
    }
  } else {
    for (std::size_t i = 0; i < labels.count(); ++i) labels.names.push_back("class_" + std::to_string(i));
  }
  return labels;
}

Json report_object(const eval::EvalReport& r) { return Json::parse(eval::report_json(r)); }

// ---------------------------------------------------------------------------

int cmd_build_synth(const RunConfig& rc, synth::SynthSpec spec,
                    const std::vector<std::string>& cats, std::ostream& out) {
  spec.seed = rc.train.seed;
  if (!cats.empty()) {
    spec.categories.clear();
    for (const auto& n : cats) spec.categories.push_back(synth::parse_primitive(n));
  }
  const auto bundle = synth::build_bundle(spec);
  synth::write_bundle(bundle, rc.output);
  for (const auto& w : bundle.mock.warnings) out << "warning: " << w << "\n";
  out << "wrote " << bundle.dataset.shapes.size() << " shapes ("
      << bundle.mock.train.shapes.size() << " train, " << bundle.mock.test.shapes.size()
      << " test) to " << rc.output.string() << "\n";
  return kExitOk;
}

int cmd_sample_points(const RunConfig& rc, const std::string& mesh_path, std::size_t points,
                      std::optional<std::size_t> budget, bool normalize, std::ostream& out) {
  require_file(fs::path(mesh_path), "mesh");
  const auto mesh = geometry::load_mesh(mesh_path);
  auto pc = geometry::sample_surface(mesh, points, rc.train.seed);
  if (budget) pc = geometry::select(pc, geometry::farthest_point_sample(pc, *budget, 0));
  if (normalize) pc = geometry::normalize_unit_sphere(pc);
  fs::create_directories(rc.output);
  const fs::path dst = rc.output / (fs::path(mesh_path).stem().string() + ".upc");
  geometry::write_point_cloud(pc, dst);
  out << "wrote " << pc.size() << " points to " << dst.string() << "\n";
  return kExitOk;
}

int cmd_rank_captions(const RunConfig& rc, std::size_t k, std::ostream& out) {
  require_file(rc.manifest, "manifest");
  require_file(rc.images, "image table");
  require_file(rc.texts, "text table");
  const auto data = load_manifest(*rc.manifest);
  const auto images = embedstore::read_table(*rc.images);
  const auto texts = embedstore::read_table(*rc.texts);
  embedstore::validate_manifest(data.manifest, images, texts);

  Json shapes = Json::array();
  embedstore::EmbeddingTable selected;
  selected.dim = texts.dim;
  selected.provenance = "top" + std::to_string(k) + "-captions";
  for (const auto& s : data.manifest.shapes) {
    Json views = Json::array();
    for (const auto& v : s.views) {
      const auto ranked = embedstore::rank_captions(v, images, texts);
      Json scores = Json::array();
      for (auto row : ranked) scores.push_back(embedstore::clip_score(images.row(v.image_row), texts.row(row)));
      views.push_back({{"view_index", v.view_index}, {"ranked", ranked}, {"scores", scores}});
      selected.append(embedstore::select_topk(v, k, images, texts));
    }
    shapes.push_back({{"shape_id", s.shape_id}, {"views", views}});
  }
  fs::create_directories(rc.output);
  write_text(rc.output / "ranked_captions.json", Json{{"shapes", shapes}}.dump(2) + "\n");
  embedstore::write_table(selected, rc.output / "selected_texts.ulp2");
  out << "ranked " << selected.count() << " views; top-" << k << " rows in "
      << (rc.output / "selected_texts.ulp2").string() << "\n";
  return kExitOk;
}

int cmd_train(RunConfig rc, std::optional<std::size_t> steps, std::ostream& out) {
  if (steps) rc.train.steps = *steps;
  require_file(rc.manifest, "manifest");
  require_file(rc.images, "image table");
  require_file(rc.texts, "text table");
  const auto data = load_manifest(*rc.manifest);
  training::DataTables tables{embedstore::read_table(*rc.images),
                              embedstore::read_table(*rc.texts)};
  training::CloudStore store(data.base);

  fs::create_directories(rc.output);
  std::ofstream log(rc.output / "run.log");
  log << "start " << wall_clock() << "\n";
  const auto t0 = std::chrono::steady_clock::now();

  std::vector<training::LossRecord> records;
  training::TrainHooks hooks;
  hooks.recovery_path = rc.output / "recovery.uckp";
  hooks.on_step = [&](const training::LossRecord& r) { records.push_back(r); };
  auto flush_log = [&] {
    std::ostringstream csv;
    training::write_loss_csv(records, csv);
    write_text(rc.output / "loss.csv", csv.str());
  };
  Json resolved = {{"model", config::to_json(rc.model)}, {"train", config::to_json(rc.train)}};
  write_text(rc.output / "config.json", resolved.dump(2) + "\n");

  training::TrainResult result;
  try {
    result = training::train(data.manifest, tables, store, rc.model, rc.train, hooks);
  } catch (...) {
    flush_log();
    log << "failed " << wall_clock() << "\n";
    throw;
  }
  flush_log();
  training::save_checkpoint(result.checkpoint, rc.output / "checkpoint.uckp");
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log << "end " << wall_clock() << "\nseconds " << secs << "\n";
  out << "trained " << result.checkpoint.step << " steps";
  if (!result.log.empty()) {
    out << ", final loss " << result.log.back().total << ", tau " << result.log.back().tau;
  }
  out << "\ncheckpoint " << (rc.output / "checkpoint.uckp").string()
      << " sha256 " << to_hex(result.checkpoint.digest) << "\n";
  return kExitOk;
}

int cmd_eval_zeroshot(const RunConfig& rc, const std::string& ckpt_path, std::ostream& out) {
  require_file(fs::path(ckpt_path), "checkpoint");
  const auto manifest_path = rc.eval_manifest ? rc.eval_manifest : rc.manifest;
  require_file(manifest_path, "evaluation manifest");
  const auto labels = load_labels(rc);
  const auto ckpt = training::load_checkpoint(ckpt_path);
  labels.validate(ckpt.encoder.embed_dim);
  const auto enc = encode_manifest(ckpt, load_manifest(*manifest_path), true);
  for (std::size_t i = 0; i < enc.labels.size(); ++i) {
    if (enc.labels[i] >= labels.count()) {
      throw DataError("label " + std::to_string(enc.labels[i]) + " out of range for " +
                      rc.labels->string());
    }
  }
  const auto preds = eval::zero_shot_classify(enc.features, labels, rc.eval_k);
  const auto report = eval::compute_metrics(preds, enc.labels, labels.count());
  fs::create_directories(rc.output);
  write_text(rc.output / "zeroshot.json", eval::report_json(report) + "\n");
  write_text(rc.output / "zeroshot.csv", eval::report_csv(report));
  write_text(rc.output / "confusion.csv", eval::confusion_csv(report, labels.names));
  out << "zero-shot top1 " << report.top1 << " top5 " << report.top5 << " class-avg "
      << report.class_average_accuracy << " (" << report.samples << " samples)\n";
  return kExitOk;
}

int cmd_eval_probe(const RunConfig& rc, const std::string& ckpt_path, const std::string& mode,
                   eval::ProbeConfig probe, std::ostream& out) {
  probe.seed = rc.train.seed;
  if (mode != "linear" && mode != "finetune") {
    throw ConfigError("--mode must be 'linear' or 'finetune', got '" + mode + "'");
  }
  require_file(fs::path(ckpt_path), "checkpoint");
  require_file(rc.manifest, "training manifest");
  require_file(rc.eval_manifest, "evaluation manifest");
  const auto ckpt = training::load_checkpoint(ckpt_path);
  const auto train = encode_manifest(ckpt, load_manifest(*rc.manifest), true);
  const auto test = encode_manifest(ckpt, load_manifest(*rc.eval_manifest), true);
  std::uint32_t classes = 0;
  for (auto y : train.labels) classes = std::max(classes, y + 1);
  for (auto y : test.labels) classes = std::max(classes, y + 1);

  const auto result =
      mode == "linear"
          ? eval::linear_probe(train.features, train.labels, test.features, test.labels, classes,
                               probe)
          : eval::finetune(ckpt.params, ckpt.encoder, train.clouds, train.labels, test.clouds,
                           test.labels, classes, probe);
  Json j = {{"mode", mode},
            {"classes", classes},
            {"train", report_object(result.train_report)},
            {"test", report_object(result.test_report)}};
  fs::create_directories(rc.output);
  write_text(rc.output / ("probe_" + mode + ".json"), j.dump(2) + "\n");
  out << mode << " probe: train top1 " << result.train_report.top1 << ", test top1 "
      << result.test_report.top1 << ", test class-avg "
      << result.test_report.class_average_accuracy << "\n";
  return kExitOk;
}

int cmd_embed(const RunConfig& rc, const std::string& ckpt_path, std::ostream& out) {
  require_file(fs::path(ckpt_path), "checkpoint");
  require_file(rc.manifest, "manifest");
  const auto ckpt = training::load_checkpoint(ckpt_path);
  const auto data = load_manifest(*rc.manifest);
  const auto enc = encode_manifest(ckpt, data, false);
  embedstore::EmbeddingTable table;
  table.dim = static_cast<std::uint32_t>(enc.features.cols());
  table.values = enc.features.data;
  table.provenance = "point-encoder:" + to_hex(ckpt.digest);
  std::string ids;
  for (const auto& s : data.manifest.shapes) ids += s.shape_id + "\n";
  fs::create_directories(rc.output);
  embedstore::write_table(table, rc.output / "embeddings.ulp2");
  write_text(rc.output / "embeddings_ids.txt", ids);
  out << "wrote " << table.count() << " embeddings of dim " << table.dim << " to "
      << (rc.output / "embeddings.ulp2").string() << "\n";
  return kExitOk;
}

int cmd_grad_check(const RunConfig& rc, bool write_report, std::ostream& out) {
  const std::uint64_t seed = rc.train.seed;
  auto suite = ag::run_op_suite(seed);
  suite.push_back(ag::run_composition_check(seed));
  bool pass = true;
  Json cases = Json::array();
  for (const auto& sc : suite) {
    double worst = 0.0;
    std::size_t checked = 0, skipped = 0;
    for (const auto& e : sc.report.entries) {
      worst = std::max(worst, e.max_rel_error);
      checked += e.checked;
      skipped += e.skipped;
    }
    const bool ok = sc.report.valid && sc.report.pass;
    pass = pass && ok;
    out << (ok ? "PASS " : "FAIL ") << std::left << std::setw(22) << sc.name
        << " max_rel_err " << std::scientific << std::setprecision(3) << worst
        << std::defaultfloat << " checked " << checked << " skipped " << skipped << "\n";
    cases.push_back({{"name", sc.name}, {"max_rel_error", worst}, {"checked", checked},
                     {"skipped", skipped}, {"pass", ok}});
  }
  out << (pass ? "grad-check: all passed\n" : "grad-check: FAILED\n");
  if (write_report) {
    fs::create_directories(rc.output);
    write_text(rc.output / "grad_check.json",
               Json{{"pass", pass}, {"cases", cases}}.dump(2) + "\n");
  }
  return pass ? kExitOk : kExitNumerical;
}

int cmd_info(const std::string& path, std::ostream& out) {
  const auto bytes = binio::read_file(path);
  const std::string magic(bytes.begin(), bytes.begin() + std::min<std::size_t>(4, bytes.size()));
  if (magic == "UPC1") {
    const auto pc = geometry::decode_point_cloud(bytes, path);
    out << path << ": UPC1 point cloud, " << pc.size() << " points, "
        << (pc.has_color() ? "xyzrgb" : "xyz") << "\n";
  } else if (magic == "ULP2") {
    const auto t = embedstore::decode_table(bytes, path);
    out << path << ": ULP2 table, " << t.count() << " rows x " << t.dim << ", provenance '"
        << t.provenance << "'\n";
  } else if (magic == "UCKP") {
    const auto ck = training::decode_checkpoint(bytes, path);
    out << path << ": checkpoint, step " << ck.step << ", " << ck.params.count()
        << " encoder scalars, embed_dim " << ck.encoder.embed_dim << ", tau "
        << ck.logit_scale.tau() << ", sha256 " << to_hex(ck.digest) << "\n";
  } else {
    const std::string text(bytes.begin(), bytes.end());
    const auto m = embedstore::manifest_from_json(text, path);
    std::size_t views = 0, captions = 0;
    for (const auto& s : m.shapes) {
      views += s.views.size();
      for (const auto& v : s.views) captions += v.caption_rows.size();
    }
    out << path << ": manifest, " << m.shapes.size() << " shapes, " << views << " views, "
        << captions << " caption references\n";
  }
  return kExitOk;
}

}  // namespace

RunConfig parse_run_config(const std::string& text, const std::string& what) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
  if (!j.is_object()) throw ConfigError(what + ": run config must be an object");
  config::reject_unknown(j, {"data", "model", "train", "eval", "output"}, what);
  RunConfig rc;
  std::optional<std::size_t> budget;
  if (j.contains("data")) {
    const auto& d = j["data"];
    config::reject_unknown(d, {"manifest", "images", "texts", "point_budget", "channels"},
                           what + ": data");
    if (d.contains("manifest")) rc.manifest = json_path(d, "manifest", "data");
    if (d.contains("images")) rc.images = json_path(d, "images", "data");
    if (d.contains("texts")) rc.texts = json_path(d, "texts", "data");
    if (d.contains("point_budget")) budget = d["point_budget"].get<std::size_t>();
    if (d.contains("channels")) rc.model.in_channels = d["channels"].get<std::uint32_t>();
  }
  try {
    if (j.contains("model")) {
      rc.model = config::encoder_from_json(j["model"], rc.model);
      if (j.contains("data") && j["data"].contains("channels")) {
        rc.model.in_channels = j["data"]["channels"].get<std::uint32_t>();
      }
    }
    if (j.contains("train")) rc.train = config::train_from_json(j["train"], rc.train);
  } catch (const Json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
  if (budget) rc.train.batch.point_budget = *budget;
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    config::reject_unknown(e, {"labels", "label_names", "manifest", "k"}, what + ": eval");
    if (e.contains("labels")) rc.labels = json_path(e, "labels", "eval");
    if (e.contains("label_names")) rc.label_names = json_path(e, "label_names", "eval");
    if (e.contains("manifest")) rc.eval_manifest = json_path(e, "manifest", "eval");
    if (e.contains("k")) rc.eval_k = e["k"].get<std::size_t>();
  }
  if (j.contains("output")) {
    const auto& o = j["output"];
    if (o.is_string()) {
      rc.output = o.get<std::string>();
    } else if (o.is_object()) {
      config::reject_unknown(o, {"dir"}, what + ": output");
      if (o.contains("dir")) rc.output = json_path(o, "dir", "output");
    } else {
      throw ConfigError(what + ": output must be a directory string or {\"dir\": ...}");
    }
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

RunConfig load_run_config(const fs::path& path) {
  if (!fs::is_regular_file(path)) throw DataError("missing run config: " + path.string());
  const auto bytes = binio::read_file(path);
  return parse_run_config(std::string(bytes.begin(), bytes.end()), path.string());
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Tri-modal (point cloud, image, text) contrastive alignment toolkit"};
  app.require_subcommand(1);

  Common common;

  auto* synth_cmd = app.add_subcommand("build-synth", "Generate a synthetic dataset bundle");
  synth::SynthSpec spec;
  std::vector<std::string> cats;
  add_common(synth_cmd, common);
  synth_cmd->add_option("--categories", cats, "Primitive names (default: all 8)");
  synth_cmd->add_option("--train-per-class", spec.train_per_class, "Training shapes per class");
  synth_cmd->add_option("--test-per-class", spec.test_per_class, "Test shapes per class");
  synth_cmd->add_option("--dim", spec.dim, "Embedding dimension");
  synth_cmd->add_option("--views", spec.views, "Views per shape");
  synth_cmd->add_option("--captions", spec.captions_per_view, "Captions per view");
  synth_cmd->add_option("--wrong-captions", spec.wrong_captions,
                        "Captions per view drawn from a wrong category");
  synth_cmd->add_option("--points", spec.points, "Points per cloud");
  synth_cmd->add_option("--sigma-image", spec.sigma_image, "Image embedding noise");
  synth_cmd->add_option("--sigma-text", spec.sigma_text, "Text embedding noise");
  synth_cmd->add_option("--shape-noise", spec.shape_noise, "Vertex noise sigma");

  auto* sample_cmd = app.add_subcommand("sample-points", "Sample a UPC1 point cloud from an OBJ mesh");
  std::string mesh_path;
  std::size_t n_points = 2048;
  std::optional<std::size_t> budget;
  bool no_normalize = false;
  add_common(sample_cmd, common);
  sample_cmd->add_option("--mesh", mesh_path, "Input OBJ file")->required();
  sample_cmd->add_option("--points", n_points, "Surface samples");
  sample_cmd->add_option("--budget", budget, "Farthest-point subsample to this many points");
  sample_cmd->add_flag("--no-normalize", no_normalize, "Skip unit-sphere normalization");

  auto* rank_cmd = app.add_subcommand("rank-captions", "Rank caption candidates by CLIP score");
  std::size_t topk = 1;
  std::optional<std::string> manifest_flag, images_flag, texts_flag;
  add_common(rank_cmd, common);
  rank_cmd->add_option("--manifest", manifest_flag, "Triplet manifest");
  rank_cmd->add_option("--images", images_flag, "Image embedding table (ULP2)");
  rank_cmd->add_option("--texts", texts_flag, "Text embedding table (ULP2)");
  rank_cmd->add_option("--k", topk, "Captions aggregated per view");

  auto* train_cmd = app.add_subcommand("train", "Train the point encoder");
  std::optional<std::size_t> steps;
  add_common(train_cmd, common);
  train_cmd->add_option("--manifest", manifest_flag, "Training manifest");
  train_cmd->add_option("--images", images_flag, "Image embedding table (ULP2)");
  train_cmd->add_option("--texts", texts_flag, "Text embedding table (ULP2)");
  train_cmd->add_option("--steps", steps, "Training steps");

  auto* zs_cmd = app.add_subcommand("eval-zeroshot", "Zero-shot classification report");
  std::string ckpt_path;
  std::optional<std::string> labels_flag, names_flag, eval_manifest_flag;
  std::optional<std::size_t> eval_k;
  add_common(zs_cmd, common);
  zs_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint (UCKP)")->required();
  zs_cmd->add_option("--manifest", eval_manifest_flag, "Evaluation manifest");
  zs_cmd->add_option("--labels", labels_flag, "Label embedding table (ULP2)");
  zs_cmd->add_option("--label-names", names_flag, "Label names, one per line");
  zs_cmd->add_option("--k", eval_k, "Ranked predictions kept per sample");

  auto* probe_cmd = app.add_subcommand("eval-probe", "Linear probe or fine-tune report");
  std::string mode = "linear";
  eval::ProbeConfig probe;
  add_common(probe_cmd, common);
  probe_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint (UCKP)")->required();
  probe_cmd->add_option("--train-manifest", manifest_flag, "Labelled training manifest");
  probe_cmd->add_option("--test-manifest", eval_manifest_flag, "Labelled test manifest");
  probe_cmd->add_option("--mode", mode, "linear or finetune")
      ->check(CLI::IsMember({"linear", "finetune"}));
  probe_cmd->add_option("--steps", probe.steps, "Optimizer steps");
  probe_cmd->add_option("--lr", probe.lr, "Head learning rate");
  probe_cmd->add_option("--encoder-lr", probe.encoder_lr, "Encoder learning rate (finetune)");
  probe_cmd->add_option("--batch-size", probe.batch_size, "Minibatch size (0 = full batch)");

  auto* embed_cmd = app.add_subcommand("embed", "Export encoder outputs as a ULP2 table");
  add_common(embed_cmd, common);
  embed_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint (UCKP)")->required();
  embed_cmd->add_option("--manifest", manifest_flag, "Manifest of shapes to embed");

  auto* gc_cmd = app.add_subcommand("grad-check", "Finite-difference check of every op");
  add_common(gc_cmd, common);

  auto* info_cmd = app.add_subcommand("info", "Describe a UPC1, ULP2, UCKP or manifest file");
  std::string info_path;
  info_cmd->add_option("file", info_path, "File to describe")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    RunConfig rc = resolve(common);
    // Flags win over the run config.
    if (manifest_flag) rc.manifest = *manifest_flag;
    if (images_flag) rc.images = *images_flag;
    if (texts_flag) rc.texts = *texts_flag;
    if (labels_flag) rc.labels = *labels_flag;
    if (names_flag) rc.label_names = *names_flag;
    if (eval_manifest_flag) rc.eval_manifest = *eval_manifest_flag;
    if (eval_k) rc.eval_k = *eval_k;

    if (synth_cmd->parsed()) return cmd_build_synth(rc, spec, cats, out);
    if (sample_cmd->parsed()) {
      return cmd_sample_points(rc, mesh_path, n_points, budget, !no_normalize, out);
    }
    if (rank_cmd->parsed()) return cmd_rank_captions(rc, topk, out);
    if (train_cmd->parsed()) return cmd_train(rc, steps, out);
    if (zs_cmd->parsed()) return cmd_eval_zeroshot(rc, ckpt_path, out);
    if (probe_cmd->parsed()) return cmd_eval_probe(rc, ckpt_path, mode, probe, out);
    if (embed_cmd->parsed()) return cmd_embed(rc, ckpt_path, out);
    if (gc_cmd->parsed()) return cmd_grad_check(rc, common.output.has_value(), out);
    return cmd_info(info_path, out);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const Json::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace ulip::cli
