#include "pcd/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "pcd/checkpoint.hpp"
#include "pcd/config.hpp"
#include "pcd/data.hpp"
#include "pcd/detector.hpp"
#include "pcd/gradcheck.hpp"
#include "pcd/trainer.hpp"

namespace pcd::cli {

namespace fs = std::filesystem;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::array<char, 32> buf{};
  std::strftime(buf.data(), buf.size(), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf.data();
}

std::string git_describe() {
  FILE* p = popen("git describe --always --dirty 2>/dev/null", "r");
  if (!p) return "unknown";
  std::string out;
  std::array<char, 128> buf{};
  while (fgets(buf.data(), buf.size(), p)) out += buf.data();
  pclose(p);
  while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
  return out.empty() ? "unknown" : out;
}

std::string RunManifest::to_json() const {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["argv"] = argv;
  j["config"] = config;
  j["seed"] = seed;
  j["git_describe"] = git_describe;
  j["started"] = started;
  j["outputs"] = outputs;
  return j.dump(2) + "\n";
}

namespace {

struct Manifest {
  fs::path dir;
  RunManifest m;

  void begin() {
    fs::create_directories(dir);
    m.started = utc_now();
    m.git_describe = git_describe();
    write_file_atomic((dir / "manifest.json").string(), m.to_json());
  }
  void finish(const std::vector<std::string>& produced) const {
    nlohmann::ordered_json j;
    j["ended"] = utc_now();
    j["outputs"] = produced;
    write_file_atomic((dir / "manifest.end.json").string(), j.dump(2) + "\n");
  }
};

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      out.push_back(static_cast<std::uint64_t>(parse_int(part)));
    } else {
      const auto lo = parse_int(part.substr(0, dash));
      const auto hi = parse_int(part.substr(dash + 1));
      if (lo < 0 || hi < lo) throw ConfigError("bad seed range '" + part + "'");
      for (long long s = lo; s <= hi; ++s) out.push_back(static_cast<std::uint64_t>(s));
    }
  }
  if (out.empty()) throw ConfigError("no seeds given");
  return out;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (!part.empty()) out.push_back(parse_double(part));
  }
  return out;
}

std::string scene_name(std::uint64_t seed) {
  std::array<char, 32> buf{};
  std::snprintf(buf.data(), buf.size(), "scene_%06llu.pcs", static_cast<unsigned long long>(seed));
  return buf.data();
}

std::vector<std::string> joined_argv(const std::vector<std::string>& args) { return args; }

int cmd_gen_data(const std::string& config, const std::string& seeds, const std::string& out,
                 const std::vector<std::string>& args) {
  const auto cfg = data::SceneGenConfig::load(config);
  const auto seed_list = parse_seeds(seeds);
  Manifest man{out, {"gen-data", joined_argv(args), cfg.serialize(), seed_list.front(), "", "", {}}};
  for (auto s : seed_list) man.m.outputs.push_back(scene_name(s));
  man.begin();
  for (auto s : seed_list) data::save_scene((fs::path(out) / scene_name(s)).string(), data::generate_scene(cfg, s));
  man.finish(man.m.outputs);
  std::cout << "wrote " << seed_list.size() << " scenes to " << out << "\n";
  return kOk;
}

std::string last_good(const fs::path& ckpt) { return fs::exists(ckpt) ? ckpt.string() : "none (failed in epoch 1)"; }

std::vector<LabeledScene> load_optional(const std::string& dir) {
  return dir.empty() ? std::vector<LabeledScene>{} : data::load_dataset(dir);
}

void print_ap(const std::vector<std::string>& classes, const std::vector<double>& ap, const std::string& label) {
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::array<char, 32> buf{};
    std::snprintf(buf.data(), buf.size(), "%.2f", 100.0 * ap[c]);
    std::cout << "  " << label << " " << classes[c] << ": " << buf.data() << " (AP points)\n";
  }
}

int cmd_train_teacher(const std::string& data_dir, const std::string& val_dir, const std::string& config,
                      const std::string& out, int eval_every, const std::vector<std::string>& args) {
  const auto cfg = PipelineConfig::load(config);
  const auto train = data::load_dataset(data_dir);
  const auto val = load_optional(val_dir);
  const fs::path dir(out);
  Manifest man{dir, {"train-teacher", joined_argv(args), cfg.serialize(), cfg.seed, "", "", {"teacher.ckpt", "metrics.csv"}}};
  man.begin();
  auto teacher = det::DetectorModel::create(det::Role::Teacher, cfg, cfg.seed);
  auto opt = train::options_from(cfg);
  opt.eval_every = eval_every;
  std::string csv = train::metrics_header(cfg.classes) + "\n";
  opt.on_epoch = [&](const train::EpochMetrics& em, const det::DetectorModel& m) {
    csv += train::metrics_row(em, cfg.n_classes()) + "\n";
    write_file_atomic((dir / "metrics.csv").string(), csv);
    m.save((dir / "teacher.ckpt").string());
    std::cout << "epoch " << em.epoch << " loss " << format_double(em.loss.total) << "\n";
  };
  try {
    const auto hist = train::train_teacher(teacher, train, val, opt);
    if (!hist.back().val_ap11.empty()) print_ap(cfg.classes, hist.back().val_ap11, "val AP@11");
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "; last good checkpoint: " << last_good(dir / "teacher.ckpt") << "\n";
    return kNumeric;
  }
  man.finish(man.m.outputs);
  return kOk;
}

int cmd_distill(const std::string& teacher_path, const std::string& data_dir, const std::string& val_dir,
                const std::string& config, const std::string& out, bool no_kd, const std::string& temps,
                int eval_every, const std::vector<std::string>& args) {
  auto teacher = det::DetectorModel::load(teacher_path);
  const auto cfg = PipelineConfig::load(config);
  det::check_compatible(teacher.cfg, cfg);
  const auto train = data::load_dataset(data_dir);
  const auto val = load_optional(val_dir);
  std::vector<double> ts = temps.empty() ? std::vector<double>{cfg.temperature} : parse_list(temps);
  for (double t : ts) {
    if (!(t > 0)) throw ConfigError("temperature must be positive");
  }
  const bool sweep = ts.size() > 1;
  const fs::path dir(out);
  Manifest man{dir, {"distill", joined_argv(args), cfg.serialize(), cfg.seed, "", "", {}}};
  for (double t : ts) {
    const fs::path sub = sweep ? fs::path("T_" + format_double(t)) : fs::path();
    man.m.outputs.push_back((sub / "student.ckpt").string());
    man.m.outputs.push_back((sub / "metrics.csv").string());
  }
  if (sweep) man.m.outputs.push_back("temperature_sweep.csv");
  man.begin();

  const std::string frozen_bytes = teacher.to_checkpoint().encode();
  std::string sweep_csv = "temperature";
  for (const auto& c : cfg.classes) sweep_csv += ",ap11_" + c;
  sweep_csv += ",map11";
  for (const auto& c : cfg.classes) sweep_csv += ",ap40_" + c;
  sweep_csv += ",map40\n";

  for (double t : ts) {
    PipelineConfig c = cfg;
    c.temperature = t;
    const fs::path sub = sweep ? dir / ("T_" + format_double(t)) : dir;
    fs::create_directories(sub);
    auto student = train::make_student(teacher, c, c.seed);
    auto opt = train::options_from(c);
    opt.eval_every = eval_every;
    std::string csv = train::metrics_header(c.classes) + "\n";
    opt.on_epoch = [&](const train::EpochMetrics& em, const det::DetectorModel& m) {
      if (teacher.to_checkpoint().encode() != frozen_bytes) throw Error("teacher parameters changed during distillation");
      csv += train::metrics_row(em, c.n_classes()) + "\n";
      write_file_atomic((sub / "metrics.csv").string(), csv);
      m.save((sub / "student.ckpt").string());
      std::cout << "T=" << format_double(t) << " epoch " << em.epoch << " loss " << format_double(em.loss.total) << "\n";
    };
    try {
      train::train_student(student, teacher, train, val, opt, !no_kd);
    } catch (const NumericError& e) {
      std::cerr << "error: " << e.what() << "; last good checkpoint: " << last_good(sub / "student.ckpt") << "\n";
      return kNumeric;
    }
    if (!val.empty()) {
      const auto r11 = train::evaluate(student, val, c.eval_iou, 11);
      const auto r40 = train::evaluate(student, val, c.eval_iou, 40);
      sweep_csv += format_double(t);
      for (double a : r11.ap) sweep_csv += "," + format_double(a);
      sweep_csv += "," + format_double(r11.mean_ap);
      for (double a : r40.ap) sweep_csv += "," + format_double(a);
      sweep_csv += "," + format_double(r40.mean_ap) + "\n";
      std::cout << "T=" << format_double(t) << " val mAP@11 " << format_double(100 * r11.mean_ap) << " mAP@40 "
                << format_double(100 * r40.mean_ap) << "\n";
    }
  }
  if (sweep) write_file_atomic((dir / "temperature_sweep.csv").string(), sweep_csv);
  man.finish(man.m.outputs);
  return kOk;
}

// Predictions CSV: scene,class,score,cx,cy,cz,w,l,h,yaw with scene indices in
// dataset (lexicographic file) order.
std::vector<boxes::ScoredBox> load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open predictions file '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line != "scene,class,score,cx,cy,cz,w,l,h,yaw") throw FormatError("unexpected predictions header", 0);
  std::vector<boxes::ScoredBox> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string f;
    std::vector<std::string> fields;
    while (std::getline(ss, f, ',')) fields.push_back(f);
    if (fields.size() != 10) throw FormatError("predictions row needs 10 fields: " + line, 0);
    boxes::ScoredBox b;
    b.scene = static_cast<int>(parse_int(fields[0]));
    b.cls = static_cast<int>(parse_int(fields[1]));
    b.score = parse_double(fields[2]);
    b.box = {parse_double(fields[3]), parse_double(fields[4]), parse_double(fields[5]), parse_double(fields[6]),
             parse_double(fields[7]), parse_double(fields[8]), parse_double(fields[9])};
    out.push_back(b);
  }
  return out;
}

std::string predictions_csv(const std::vector<boxes::ScoredBox>& preds) {
  std::string s = "scene,class,score,cx,cy,cz,w,l,h,yaw\n";
  for (const auto& p : preds) {
    s += std::to_string(p.scene) + "," + std::to_string(p.cls) + "," + format_double(p.score);
    for (double v : {p.box.cx, p.box.cy, p.box.cz, p.box.w, p.box.l, p.box.h, p.box.yaw}) s += "," + format_double(v);
    s += "\n";
  }
  return s;
}

int cmd_eval(const std::string& model, const std::string& preds_path, const std::string& data_dir, double iou,
             int rp, const std::string& classes_text, const std::string& out_csv, const std::string& write_preds) {
  if (model.empty() == preds_path.empty()) throw CLI::ValidationError("eval needs exactly one of --model or --predictions");
  const auto scenes = data::load_dataset(data_dir);
  std::vector<std::string> classes;
  std::vector<double> ap;
  if (!model.empty()) {
    auto m = det::DetectorModel::load(model);
    classes = m.cfg.classes;
    const auto r = train::evaluate(m, scenes, iou, rp);
    ap = r.ap;
    if (!write_preds.empty()) write_file_atomic(write_preds, predictions_csv(r.predictions));
  } else {
    std::stringstream ss(classes_text);
    std::string c;
    while (std::getline(ss, c, ',')) classes.push_back(c);
    const auto preds = load_predictions(preds_path);
    ap = boxes::evaluate_ap(preds, train::ground_truths(scenes), static_cast<int>(classes.size()), iou, rp);
  }
  std::string csv = "class,iou,recall_positions,ap\n";
  std::cout << "class        AP@" << rp << " (3D IoU " << format_double(iou) << ")\n";
  double mean = 0;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::array<char, 64> buf{};
    std::snprintf(buf.data(), buf.size(), "%-12s %7.2f\n", classes[c].c_str(), 100.0 * ap[c]);
    std::cout << buf.data();
    csv += classes[c] + "," + format_double(iou) + "," + std::to_string(rp) + "," + format_double(ap[c]) + "\n";
    mean += ap[c] / static_cast<double>(classes.size());
  }
  std::cout << "mean         " << format_double(100.0 * mean) << "\n";
  if (!out_csv.empty()) write_file_atomic(out_csv, csv);
  return kOk;
}

int cmd_bench(const std::string& config, const std::string& scene_config, int n_scenes, const std::string& out_csv) {
  const auto cfg = PipelineConfig::load(config);
  const auto gen = scene_config.empty() ? data::SceneGenConfig{} : data::SceneGenConfig::load(scene_config);
  std::vector<LabeledScene> scenes;
  for (int i = 0; i < n_scenes; ++i) scenes.push_back(data::generate_scene(gen, 1000 + static_cast<std::uint64_t>(i)));
  std::string csv = "role,parameters,partial_queries_per_scene,object_queries_per_scene,macs_per_scene,ms_per_scene\n";
  std::cout << "role      parameters  partial_q/scene  object_q/scene  MACs/scene      ms/scene\n";
  for (auto role : {det::Role::Teacher, det::Role::Student}) {
    auto m = det::DetectorModel::create(role, cfg, cfg.seed);
    double partial_q = 0, object_q = 0, macs = 0, ms = 0;
    for (const auto& s : scenes) {
      ad::Graph g;
      const auto t0 = std::chrono::steady_clock::now();
      const auto out = det::forward(g, m, s.cloud);
      const auto t1 = std::chrono::steady_clock::now();
      partial_q += static_cast<double>(out.partial_queries);
      object_q += static_cast<double>(out.object_queries);
      macs += static_cast<double>(g.macs());
      ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    const double n = static_cast<double>(scenes.size());
    std::array<char, 160> buf{};
    std::snprintf(buf.data(), buf.size(), "%-8s %11zu %16.0f %15.0f %11.4g %13.2f\n", det::role_name(role).c_str(),
                  m.parameter_count(), partial_q / n, object_q / n, macs / n, ms / n);
    std::cout << buf.data();
    csv += det::role_name(role) + "," + std::to_string(m.parameter_count()) + "," + format_double(partial_q / n) + "," +
           format_double(object_q / n) + "," + format_double(macs / n) + "," + format_double(ms / n) + "\n";
  }
  if (!out_csv.empty()) write_file_atomic(out_csv, csv);
  return kOk;
}

int cmd_gradcheck(const std::string& fault, const std::string& filter, std::uint64_t seed) {
  gradcheck::Options opt;
  opt.fault = fault;
  opt.filter = filter;
  opt.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = gradcheck::run_suite(opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const gradcheck::CheckResult* worst = nullptr;
  bool ok = true;
  for (const auto& r : results) {
    std::array<char, 160> buf{};
    std::snprintf(buf.data(), buf.size(), "%-26s entries %5d  skipped %3d  max rel err %.3e  %s\n", r.name.c_str(),
                  r.entries, r.skipped, r.max_rel_error, r.passed ? "ok" : "FAIL");
    std::cout << buf.data();
    ok = ok && r.passed;
    if (!worst || r.max_rel_error > worst->max_rel_error) worst = &r;
  }
  if (worst) {
    std::cout << "worst op: " << worst->name << " (relative error " << worst->max_rel_error << " at "
              << worst->worst << ": analytic " << worst->worst_analytic << ", numeric " << worst->worst_numeric
              << ")\n";
  }
  std::cout << results.size() << " checks in " << format_double(std::round(secs * 100) / 100) << " s\n";
  return ok ? kOk : kValidation;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"pcdet: point-cloud detector distillation toolkit"};
  app.require_subcommand(1);

  std::string config, seeds, out, data_dir, val_dir, teacher, temps, model, preds, classes = "car,cyclist", out_csv,
                                                                               write_preds, scene_config, fault, filter;
  int eval_every = 1, rp = 11, n_scenes = 3;
  double iou = 0.5;
  bool no_kd = false;
  std::uint64_t seed = 7;

  auto* gen = app.add_subcommand("gen-data", "generate synthetic labeled scenes");
  gen->add_option("--config", config, "scene generator config")->required();
  gen->add_option("--seeds", seeds, "comma list of seeds or inclusive ranges a-b")->required();
  gen->add_option("--out", out, "output directory")->required();

  auto* tt = app.add_subcommand("train-teacher", "train the multi-scale teacher");
  tt->add_option("--data", data_dir, "training scene directory")->required();
  tt->add_option("--val", val_dir, "validation scene directory");
  tt->add_option("--config", config, "pipeline config")->required();
  tt->add_option("--out", out, "output directory")->required();
  tt->add_option("--eval-every", eval_every, "validate every n epochs (0: last epoch only)");

  auto* ds = app.add_subcommand("distill", "train a student against a frozen teacher");
  ds->add_option("--teacher", teacher, "teacher checkpoint")->required();
  ds->add_option("--data", data_dir, "training scene directory")->required();
  ds->add_option("--val", val_dir, "validation scene directory");
  ds->add_option("--config", config, "student pipeline config")->required();
  ds->add_option("--out", out, "output directory")->required();
  ds->add_flag("--no-kd", no_kd, "hard labels only (lambda_soft = 0)");
  ds->add_option("--T", temps, "temperature or comma list of temperatures (sweep)");
  ds->add_option("--eval-every", eval_every, "validate every n epochs (0: last epoch only)");

  auto* ev = app.add_subcommand("eval", "average precision of a model or a predictions file");
  ev->add_option("--model", model, "checkpoint");
  ev->add_option("--predictions", preds, "predictions CSV");
  ev->add_option("--data", data_dir, "scene directory")->required();
  ev->add_option("--iou", iou, "3D IoU threshold")->check(CLI::Range(0.0, 1.0));
  ev->add_option("--rp", rp, "recall positions")->check(CLI::IsMember({11, 40}));
  ev->add_option("--classes", classes, "class names for a predictions file");
  ev->add_option("--out", out_csv, "AP CSV");
  ev->add_option("--write-predictions", write_preds, "write the model's predictions CSV");

  auto* bn = app.add_subcommand("bench", "teacher vs student complexity");
  bn->add_option("--config", config, "pipeline config")->required();
  bn->add_option("--scene-config", scene_config, "scene generator config");
  bn->add_option("--scenes", n_scenes, "scenes to time")->check(CLI::PositiveNumber);
  bn->add_option("--out", out_csv, "CSV output");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--fault", fault, "corrupt the backward pass of this check (negative control)");
  gc->add_option("--filter", filter, "only checks whose name contains this text");
  gc->add_option("--seed", seed, "input seed");

  std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kUsage;
  }
  try {
    if (*gen) return cmd_gen_data(config, seeds, out, args);
    if (*tt) return cmd_train_teacher(data_dir, val_dir, config, out, eval_every, args);
    if (*ds) return cmd_distill(teacher, data_dir, val_dir, config, out, no_kd, temps, eval_every, args);
    if (*ev) return cmd_eval(model, preds, data_dir, iou, rp, classes, out_csv, write_preds);
    if (*bn) return cmd_bench(config, scene_config, n_scenes, out_csv);
    if (*gc) return cmd_gradcheck(fault, filter, seed);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  }
  return kUsage;
}

int run(int argc, const char* const* argv) { return run(std::vector<std::string>(argv, argv + argc)); }

}  // namespace pcd::cli
