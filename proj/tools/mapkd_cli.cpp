// mapkd: data generation, training, distillation, evaluation and figures.

#include <malloc.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "mapkd/config.hpp"
#include "mapkd/gradsuite.hpp"
#include "mapkd/metrics.hpp"
#include "mapkd/nets.hpp"
#include "mapkd/synthworld.hpp"
#include "mapkd/trainer.hpp"
#include "mapkd/viz.hpp"

namespace fs = std::filesystem;
using namespace mapkd;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::string data;
};

void add_common(CLI::App* cmd, Common& c, bool with_data = true) {
  cmd->add_option("--config", c.config, "JSON config file");
  cmd->add_option("--set", c.overrides, "dotted-key override, e.g. train.epochs=4");
  cmd->add_option("--seed", c.seed, "master seed (overrides train.seed)");
  cmd->add_option("--out", c.out, "output directory");
  if (with_data) cmd->add_option("--data", c.data, "directory with train.jsonl and eval.jsonl from `gen`");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = load_config(c.config, c.overrides);
  if (c.seed) {
    cfg.train.seed = *c.seed;
    if (cfg.seeds.size() == 1) cfg.seeds = {*c.seed};
  }
  return cfg;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

fs::path prepare(const Common& c, const ExperimentConfig& cfg) {
  fs::path out(c.out);
  fs::create_directories(out);
  write_text(out / "config.json", config_to_json(cfg) + "\n");
  return out;
}

train::Dataset load_data(const Common& c, const ExperimentConfig& cfg) {
  if (c.data.empty()) return train::make_dataset(cfg, cfg.train.seed);
  train::Dataset d;
  d.train = world::read_scenes(fs::path(c.data) / "train.jsonl");
  d.eval = world::read_scenes(fs::path(c.data) / "eval.jsonl");
  return d;
}

void log(const std::string& s) { std::cerr << s << std::endl; }

void write_metrics(const fs::path& dir, const metrics::MetricReport& m, const std::string& prefix = "") {
  write_text(dir / (prefix + "metrics.txt"), metrics::to_text(m));
  write_text(dir / (prefix + "metrics.csv"), metrics::to_csv(m));
}

train::RunOptions epoch_logger(const std::string& kind) {
  train::RunOptions o;
  o.on_epoch = [kind](const train::RunRecord&, const train::EpochLog& e) {
    std::cerr << kind << " epoch " << e.epoch << " loss " << e.mean.total << " pred " << e.mean.pred << "\n";
  };
  return o;
}

int cmd_gen(const Common& c, int train_count, int eval_count) {
  ExperimentConfig cfg = resolve(c);
  if (train_count >= 0) cfg.train_scenes = train_count;
  if (eval_count >= 0) cfg.eval_scenes = eval_count;
  const fs::path out = prepare(c, cfg);
  const train::Dataset d = train::make_dataset(cfg, cfg.train.seed);
  world::write_scenes(out / "train.jsonl", d.train);
  world::write_scenes(out / "eval.jsonl", d.eval);
  const nlohmann::json manifest = {{"seed", cfg.train.seed},
                                   {"train_scenes", d.train.size()},
                                   {"eval_scenes", d.eval.size()},
                                   {"t_obs", cfg.world.t_obs},
                                   {"t_pred", cfg.world.t_pred},
                                   {"files", {"train.jsonl", "eval.jsonl"}}};
  write_text(out / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "wrote " << d.train.size() << " training and " << d.eval.size() << " evaluation scenes to "
            << out.string() << "\n";
  return 0;
}

int cmd_import(const Common& c, const std::string& csv) {
  const ExperimentConfig cfg = resolve(c);
  fs::path out(c.out);
  fs::create_directories(out);
  const auto scenes = world::import_csv(csv, cfg.world.t_obs, cfg.world.t_pred);
  world::write_scenes(out / "scenes.jsonl", scenes);
  write_text(out / "manifest.json",
             nlohmann::json({{"source", csv}, {"scenes", scenes.size()}, {"files", {"scenes.jsonl"}}}).dump(2) + "\n");
  std::cout << "imported " << scenes.size() << " scene(s) to " << (out / "scenes.jsonl").string() << "\n";
  return 0;
}

int cmd_train_teacher(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const fs::path out = prepare(c, cfg);
  const train::Dataset d = load_data(c, cfg);
  train::RunRecord rec;
  auto opts = epoch_logger("teacher");
  opts.eval = &d.eval;
  nets::Predictor teacher = train::train_teacher(d.train, cfg, cfg.train.seed, rec, opts);
  teacher.save(out / "teacher.ckpt");
  const auto m = train::evaluate_model(teacher, d.eval, cfg.eval_k, cfg.train.batch_size, cfg.model.t_obs);
  write_text(out / "run.json", rec.to_json() + "\n");
  write_metrics(out, m);
  std::cout << metrics::to_text(m);
  return 0;
}

int cmd_distill(const Common& c, const std::string& teacher_path, bool baseline) {
  const ExperimentConfig cfg = resolve(c);
  if (!baseline && teacher_path.empty()) throw std::runtime_error("distill needs --teacher (or --baseline)");
  const fs::path out = prepare(c, cfg);
  const train::Dataset d = load_data(c, cfg);
  std::optional<nets::Predictor> teacher;
  if (!baseline) teacher = nets::Predictor::load(teacher_path);
  train::RunRecord rec;
  auto opts = epoch_logger(baseline ? "baseline" : "student");
  opts.eval = &d.eval;
  nets::Predictor student =
      train::train_student(d.train, teacher ? &*teacher : nullptr, cfg, cfg.train.seed, rec, opts);
  student.save(out / (baseline ? "baseline.ckpt" : "student.ckpt"), true);
  const auto m = train::evaluate_model(student, d.eval, cfg.eval_k, cfg.train.batch_size, cfg.train.history_length);
  write_text(out / "run.json", rec.to_json() + "\n");
  write_metrics(out, m);
  std::cout << metrics::to_text(m);
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& scenes_path, int history) {
  const ExperimentConfig cfg = resolve(c);
  fs::path out(c.out);
  fs::create_directories(out);
  nets::Predictor model = nets::Predictor::load(checkpoint);
  const auto scenes = world::read_scenes(scenes_path);
  std::vector<int> ks;
  for (int k : cfg.eval_k)
    if (k <= model.config().modes) ks.push_back(k);
  const int h = history > 0 ? history : model.config().t_obs;
  const auto m = train::evaluate_model(model, scenes, ks, cfg.train.batch_size, h);
  write_metrics(out, m);
  std::ostringstream rows;
  rows << "scene,behavior,k,minADE,minFDE,miss,brier_minFDE\n";
  for (std::size_t i = 0; i < m.per_scene.size(); ++i) {
    const std::string beh(scenes[i].behavior ? world::behavior_name(*scenes[i].behavior) : "");
    for (const auto& [k, s] : m.per_scene[i])
      rows << i << ',' << beh << ',' << k << ',' << s.min_ade << ',' << s.min_fde << ',' << (s.miss ? 1 : 0) << ','
           << s.brier_min_fde << '\n';
  }
  write_text(out / "per_scene.csv", rows.str());
  std::cout << metrics::to_text(m);
  return 0;
}

int cmd_ablate(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  const fs::path out = prepare(c, cfg);
  const train::Dataset d = load_data(c, cfg);
  std::vector<nets::Predictor> teachers;
  const train::Comparison cmp = train::run_comparison(cfg, d, log, &teachers);
  const train::Ablation ab = train::run_ablation(cfg, d, teachers, &cmp, log);
  fs::create_directories(out / "runs");
  for (const auto& sm : cmp.seeds) {
    const std::string tag = "seed" + std::to_string(sm.seed);
    write_text(out / "runs" / (tag + "_teacher.json"), sm.teacher_record.to_json());
    write_text(out / "runs" / (tag + "_baseline.json"), sm.baseline_record.to_json());
    write_text(out / "runs" / (tag + "_fokd.json"), sm.fokd_record.to_json());
  }
  const int k = cfg.eval_k.back();
  write_text(out / "ablation.csv", ab.table(k));
  std::string summary = metrics::to_text(cmp.teacher, "teacher.") + metrics::to_text(cmp.baseline, "baseline.") +
                        metrics::to_text(cmp.fokd, "fokd.");
  summary += "relative_gain_minFDE_" + std::to_string(k) + "=" + std::to_string(cmp.relative_gain(k)) + "\n";
  summary += "both_on_best_seeds=" + std::to_string(ab.both_best_seeds) + "\n";
  write_text(out / "summary.txt", summary);
  std::cout << ab.table(k) << summary;
  return 0;
}

int cmd_kscan(const Common& c, const std::string& student_path, const std::string& baseline_path) {
  const ExperimentConfig cfg = resolve(c);
  const fs::path out = prepare(c, cfg);
  train::Curve curve;
  if (!student_path.empty() || !baseline_path.empty()) {
    if (student_path.empty() || baseline_path.empty()) throw std::runtime_error("kscan needs both --student and --baseline");
    nets::Predictor s = nets::Predictor::load(student_path), b = nets::Predictor::load(baseline_path);
    const train::Dataset d = load_data(c, cfg);
    curve = train::k_scaling(s, b, d.eval, cfg.kscan_k, cfg.train.batch_size);
  } else {
    curve = train::run_k_scaling(cfg, load_data(c, cfg), log);
  }
  write_text(out / "kscan.csv", curve.csv());
  std::cout << curve.csv();
  return 0;
}

int cmd_histscan(const Common& c, const std::string& teacher_path) {
  const ExperimentConfig cfg = resolve(c);
  const fs::path out = prepare(c, cfg);
  const train::Dataset d = load_data(c, cfg);
  std::optional<nets::Predictor> teacher;
  if (!teacher_path.empty()) {
    teacher = nets::Predictor::load(teacher_path);
  } else {
    train::RunRecord rec;
    teacher = train::train_teacher(d.train, cfg, cfg.train.seed, rec);
  }
  const train::Curve curve = train::run_history_sweep(cfg, d, *teacher, log);
  write_text(out / "history.csv", curve.csv());
  std::cout << curve.csv();
  return 0;
}

int cmd_gradcheck(const std::string& module, int trials, std::uint64_t seed) {
  const auto rows = run_gradcheck_suite(module, trials, seed);
  std::cout << format_gradcheck_table(rows);
  for (const auto& r : rows)
    if (!r.pass()) return 1;
  return 0;
}

int cmd_viz(const Common& c, const std::string& scenes_path, int index, const std::string& checkpoint,
            const std::string& compare, const std::string& out_file) {
  const auto scenes = world::read_scenes(scenes_path);
  if (index < 0 || static_cast<std::size_t>(index) >= scenes.size()) throw std::runtime_error("scene index out of range");
  const world::Scene& scene = scenes[index];
  std::vector<metrics::Prediction> preds;
  std::vector<std::string> titles;
  for (const std::string& path : {checkpoint, compare}) {
    if (path.empty()) continue;
    nets::Predictor m = nets::Predictor::load(path);
    preds.push_back(train::predict(m, std::span(&scene, 1), 1, m.config().t_obs).front());
    titles.push_back(fs::path(path).stem().string() + " K=" + std::to_string(m.config().modes));
  }
  if (preds.empty()) throw std::runtime_error("viz needs --checkpoint");
  std::vector<viz::Panel> panels;
  for (std::size_t i = 0; i < preds.size(); ++i) panels.push_back({&preds[i], titles[i]});
  fs::path target = out_file.empty() ? fs::path(c.out) / ("scene_" + std::to_string(index) + ".svg") : fs::path(out_file);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  viz::write_file(target, viz::render_svg(scene, panels));
  std::cout << "wrote " << target.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Tape tensors are allocated and freed every step; keep them off mmap.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"Map-free trajectory prediction with map-aware distillation"};
  app.require_subcommand(1);

  Common common;
  int train_count = -1, eval_count = -1;
  auto* gen = app.add_subcommand("gen", "generate synthetic scenes");
  add_common(gen, common, false);
  gen->add_option("--train", train_count, "training scene count");
  gen->add_option("--eval", eval_count, "evaluation scene count");

  std::string csv;
  auto* import = app.add_subcommand("import", "convert an Argoverse-style CSV to scene lines");
  add_common(import, common, false);
  import->add_option("--csv", csv, "input CSV")->required();

  auto* teach = app.add_subcommand("train-teacher", "train the map-aware teacher");
  add_common(teach, common);

  std::string teacher_path;
  bool baseline = false;
  auto* distill = app.add_subcommand("distill", "train a mapless student against a teacher");
  add_common(distill, common);
  distill->add_option("--teacher", teacher_path, "teacher checkpoint");
  distill->add_flag("--baseline", baseline, "train the plain mapless baseline instead");

  std::string checkpoint, scenes_path;
  int history = 0;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a scene file");
  add_common(eval, common, false);
  eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  eval->add_option("--scenes", scenes_path, "scene file (JSON lines)")->required();
  eval->add_option("--history", history, "observed steps visible to the model");

  auto* ablate = app.add_subcommand("ablate", "teacher / baseline / distilled comparison and the FKD x OKD grid");
  add_common(ablate, common);

  std::string student_path, baseline_path;
  auto* kscan = app.add_subcommand("kscan", "minFDE improvement as a function of K");
  add_common(kscan, common);
  kscan->add_option("--student", student_path, "distilled student checkpoint");
  kscan->add_option("--baseline", baseline_path, "baseline checkpoint");

  auto* histscan = app.add_subcommand("histscan", "distillation gain as a function of history length");
  add_common(histscan, common);
  histscan->add_option("--teacher", teacher_path, "teacher checkpoint (trained when absent)");

  std::string module = "all";
  int trials = 100;
  std::uint64_t gc_seed = 1;
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--module", module, "diffcore, nets, losses or all");
  gradcheck->add_option("--trials", trials, "random trials per check");
  gradcheck->add_option("--seed", gc_seed, "seed");

  int index = 0;
  std::string compare, out_file;
  auto* vizcmd = app.add_subcommand("viz", "render a scene and predictions to SVG");
  add_common(vizcmd, common, false);
  vizcmd->add_option("--scenes", scenes_path, "scene file")->required();
  vizcmd->add_option("--index", index, "scene index");
  vizcmd->add_option("--checkpoint", checkpoint, "model checkpoint");
  vizcmd->add_option("--compare", compare, "second checkpoint for a side-by-side panel");
  vizcmd->add_option("--file", out_file, "output SVG path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "mapkd: " << e.what() << "\n";
    return 2;
  }

  try {
    if (*gen) return cmd_gen(common, train_count, eval_count);
    if (*import) return cmd_import(common, csv);
    if (*teach) return cmd_train_teacher(common);
    if (*distill) return cmd_distill(common, teacher_path, baseline);
    if (*eval) return cmd_eval(common, checkpoint, scenes_path, history);
    if (*ablate) return cmd_ablate(common);
    if (*kscan) return cmd_kscan(common, student_path, baseline_path);
    if (*histscan) return cmd_histscan(common, teacher_path);
    if (*gradcheck) return cmd_gradcheck(module, trials, gc_seed);
    if (*vizcmd) return cmd_viz(common, scenes_path, index, checkpoint, compare, out_file);
  } catch (const ConfigError& e) {
    std::cerr << "mapkd: config error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "mapkd: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
