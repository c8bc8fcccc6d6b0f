// defnet command-line driver: dataset generation, gradient checks, training,
// evaluation, greedy ensembling and the component ablation ladder. Metrics go
// to stdout as a single JSON document; human-readable tables go to stderr.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "defnet/dataset.hpp"
#include "defnet/defpool.hpp"
#include "defnet/dpm_oracle.hpp"
#include "defnet/net.hpp"
#include "defnet/pipeline.hpp"
#include "defnet/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace defnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;

// Values from --config <file.json> become defaults; explicit command-line
// flags override them because CLI11 assigns bound variables only when parsed.
json load_config_defaults(int argc, char** argv) {
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--config") {
      std::ifstream is(argv[i + 1]);
      if (!is) throw SpecError("cannot open config file: " + std::string(argv[i + 1]));
      return json::parse(is);
    }
  }
  return json::object();
}

template <typename T>
void bind_option(CLI::App* cmd, const json& cfg, const std::string& flag, T& var,
                 const std::string& desc) {
  const std::string key = flag.substr(2);
  if (cfg.contains(key)) var = cfg.at(key).get<T>();
  cmd->add_option(flag, var, desc);
}

void bind_switch(CLI::App* cmd, const json& cfg, const std::string& flag, std::string& var,
                 const std::string& desc) {
  bind_option(cmd, cfg, flag, var, desc + " (on|off)");
}

bool parse_on_off(const std::string& v, const std::string& flag) {
  if (v == "on") return true;
  if (v == "off") return false;
  throw ParameterError(flag + " must be 'on' or 'off'");
}

void emit(const json& metrics) { std::cout << metrics.dump(2) << "\n"; }

// --- shared model/pipeline assembly -------------------------------------------

struct EvalComponents {
  Rejector rejector;
  ContextRefiner context;
  BboxRegressor regressor;
};

NetConfig detector_net_config(const Dataset& ds, bool defpool, std::uint64_t seed) {
  NetConfig cfg;
  cfg.input_channels = 1;
  cfg.input_size = 20;
  cfg.classes = static_cast<std::size_t>(ds.spec.classes);
  cfg.branch_pool = defpool ? BranchPool::kAxes : BranchPool::kZeroWindow;
  cfg.seed = seed;
  return cfg;
}

std::vector<SyntheticScene> pick_split(const Dataset& ds, const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "val") return ds.val;
  auto [val1, val2] = split_val(ds);
  if (split == "val1") return val1;
  if (split == "val2") return val2;
  throw ParameterError("split must be train, val, val1 or val2");
}

json eval_to_json(const EvalResult& res) {
  json j;
  j["map"] = res.map;
  j["per_class_ap"] = res.per_class_ap;
  j["skipped_classes"] = res.skipped_classes;
  return j;
}

// --- gen -----------------------------------------------------------------------

int run_gen(const DatasetSpec& spec, const std::string& out_dir) {
  const Dataset ds = generate_dataset(spec);
  save_dataset(ds, out_dir);
  json metrics;
  metrics["command"] = "gen";
  metrics["out"] = out_dir;
  metrics["classes"] = ds.class_names;
  metrics["themes"] = ds.themes;
  metrics["train_scenes"] = ds.train.size();
  metrics["val_scenes"] = ds.val.size();
  std::size_t objects = 0;
  for (const SyntheticScene& s : ds.train) objects += s.objects.size();
  metrics["train_objects"] = objects;
  emit(metrics);
  std::cerr << "dataset written to " << out_dir << " (" << ds.train.size() << " train / "
            << ds.val.size() << " val scenes)\n";
  return kExitOk;
}

// --- gradcheck --------------------------------------------------------------------

double fd_rel_err(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  if (diff < 1e-8) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct GradCheckReport {
  double defpool_coeffs = 0.0;
  double defpool_input = 0.0;
  double network_params = 0.0;
};

GradCheckReport run_defpool_gradcheck(double eps, std::uint64_t seed, bool corrupt) {
  Rng rng(seed);
  GradCheckReport report;
  auto rounded = [&rng](double lo, double hi) {
    return std::round(rng.uniform(lo, hi) * 1000.0) / 1000.0;
  };

  // smallest best-to-runner-up gap over all anchors; instances are
  // regenerated until it clears the finite-difference step comfortably
  auto min_candidate_gap = [](const Tensor& m, const DefPoolConfig& c) {
    const std::size_t channels = m.dim(0), h = m.dim(1), w = m.dim(2);
    double min_gap = std::numeric_limits<double>::infinity();
    for (std::size_t ch = 0; ch < channels; ++ch) {
      const PenaltyBasis& basis = c.basis_for(ch);
      const std::vector<double>& a = c.coeffs_for(ch);
      for (std::size_t oy = 0; oy < h / c.sy; ++oy) {
        for (std::size_t ox = 0; ox < w / c.sx; ++ox) {
          std::vector<double> vals;
          for (int dy = -basis.radius; dy <= basis.radius; ++dy) {
            for (int dx = -basis.radius; dx <= basis.radius; ++dx) {
              const int ry = static_cast<int>(oy) * c.sy + dy;
              const int rx = static_cast<int>(ox) * c.sx + dx;
              if (ry < 0 || rx < 0 || ry >= static_cast<int>(h) || rx >= static_cast<int>(w)) {
                continue;
              }
              double penalty = 0.0;
              for (std::size_t n = 0; n < basis.count(); ++n) {
                penalty += a[n] * basis.entry(n, dy, dx);
              }
              vals.push_back(m.at(ch, static_cast<std::size_t>(ry),
                                  static_cast<std::size_t>(rx)) -
                             penalty);
            }
          }
          if (vals.size() < 2) continue;
          std::sort(vals.begin(), vals.end(), std::greater<double>());
          min_gap = std::min(min_gap, vals[0] - vals[1]);
        }
      }
    }
    return min_gap;
  };

  for (int radius : {0, 1, 2}) {
    for (int stride : {1, 2, 3}) {
      for (std::size_t n_bases : {std::size_t{1}, std::size_t{4}}) {
        Tensor m({2, 7, 7});
        DefPoolConfig cfg;
        for (int attempt = 0; attempt < 50; ++attempt) {
          for (double& v : m.data()) v = rounded(0.0, 10.0);
          cfg = DefPoolConfig{};
          cfg.sx = cfg.sy = stride;
          PenaltyBasis basis;
          basis.radius = radius;
          for (std::size_t n = 0; n < n_bases; ++n) {
            Tensor t = penalty_table(radius, 0.0);
            for (double& v : t.data()) v = rounded(0.0, 2.0);
            basis.tables.push_back(std::move(t));
          }
          cfg.bases.push_back(std::move(basis));
          cfg.coeffs.assign(1, {});
          for (std::size_t n = 0; n < n_bases; ++n) cfg.coeffs[0].push_back(rounded(0.2, 1.5));
          if (min_candidate_gap(m, cfg) > 1e-3) break;
        }

        DefPoolResult fwd = defpool_forward(m, cfg);
        std::vector<double> w(fwd.output.size());
        for (double& v : w) v = rng.uniform(-1.0, 1.0);
        Tensor grad_out(fwd.output.shape());
        for (std::size_t i = 0; i < w.size(); ++i) grad_out[i] = w[i];
        DefPoolGrads grads = defpool_backward(grad_out, fwd.record, cfg);
        if (corrupt) grads.coeffs[0][0] += 0.5;

        auto loss_of = [&](const Tensor& map, const DefPoolConfig& c) {
          const Tensor out = defpool_forward(map, c).output;
          double loss = 0.0;
          for (std::size_t i = 0; i < out.size(); ++i) loss += w[i] * out[i];
          return loss;
        };

        for (std::size_t n = 0; n < cfg.coeffs[0].size(); ++n) {
          const double keep = cfg.coeffs[0][n];
          cfg.coeffs[0][n] = keep + eps;
          const double lp = loss_of(m, cfg);
          cfg.coeffs[0][n] = keep - eps;
          const double lm = loss_of(m, cfg);
          cfg.coeffs[0][n] = keep;
          report.defpool_coeffs =
              std::max(report.defpool_coeffs, fd_rel_err(grads.coeffs[0][n], (lp - lm) / (2 * eps)));
        }
        for (std::size_t i = 0; i < m.size(); ++i) {
          const double keep = m[i];
          m[i] = keep + eps;
          const double lp = loss_of(m, cfg);
          m[i] = keep - eps;
          const double lm = loss_of(m, cfg);
          m[i] = keep;
          report.defpool_input =
              std::max(report.defpool_input, fd_rel_err(grads.input[i], (lp - lm) / (2 * eps)));
        }
      }
    }
  }
  return report;
}

double run_network_gradcheck(double eps, std::uint64_t seed, bool corrupt) {
  NetConfig cfg;
  cfg.input_channels = 1;
  cfg.input_size = 12;
  cfg.classes = 3;
  cfg.trunk_filters1 = 3;
  cfg.trunk_filters2 = 4;
  cfg.branches = {{3, 3}};
  cfg.branch_pool = BranchPool::kAxes;
  cfg.pool_radius = 1;
  cfg.seed = seed;
  Network net(cfg);

  Rng rng(seed + 1);
  Tensor img({1, 12, 12});
  for (double& v : img.data()) v = rng.uniform(0.0, 1.0);
  const std::vector<int> labels = {1, -1, 1};

  net.zero_grads();
  auto [loss, grad] = hinge_loss(net.forward(img), labels);
  net.backward(grad);

  double worst = 0.0;
  bool first = corrupt;
  for (ParamRef& p : net.params()) {
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      const double keep = (*p.value)[i];
      (*p.value)[i] = keep + eps;
      const double lp = hinge_loss(net.forward(img), labels).first;
      (*p.value)[i] = keep - eps;
      const double lm = hinge_loss(net.forward(img), labels).first;
      (*p.value)[i] = keep;
      double analytic = (*p.grad)[i];
      if (first) {  // negative-control fixture: corrupt one analytic entry
        analytic += 0.5;
        first = false;
      }
      worst = std::max(worst, fd_rel_err(analytic, (lp - lm) / (2 * eps)));
    }
  }
  return worst;
}

int run_gradcheck(double eps, std::uint64_t seed, bool corrupt) {
  const GradCheckReport defpool_report = run_defpool_gradcheck(eps, seed, corrupt);
  const double net_err = run_network_gradcheck(eps, seed, corrupt);

  const bool pass = defpool_report.defpool_coeffs < 1e-6 && defpool_report.defpool_input < 1e-6 &&
                    net_err < 1e-4;
  json metrics;
  metrics["command"] = "gradcheck";
  metrics["eps"] = eps;
  metrics["seed"] = seed;
  metrics["max_rel_err"] = {{"defpool_coeffs", defpool_report.defpool_coeffs},
                            {"defpool_input", defpool_report.defpool_input},
                            {"network_params", net_err}};
  metrics["thresholds"] = {{"defpool_coeffs", 1e-6}, {"defpool_input", 1e-6},
                           {"network_params", 1e-4}};
  metrics["pass"] = pass;
  emit(metrics);
  std::cerr << "gradcheck " << (pass ? "PASS" : "FAIL") << ": coeffs "
            << defpool_report.defpool_coeffs << ", input " << defpool_report.defpool_input
            << ", network " << net_err << "\n";
  return pass ? kExitOk : kExitCheckFailed;
}

// --- train -----------------------------------------------------------------------

struct TrainFlags {
  std::string dataset;
  std::string out;
  std::string scheme = "none";
  std::string defpool = "on";
  std::string rejection = "off";
  double keep_fraction = 0.3;
  std::size_t iterations = 400;
  std::size_t pre_iterations = 250;
  std::size_t batch = 16;
  double lr = 0.01;
  double weight_decay = 1e-4;
  std::uint64_t seed = 1;
};

TrainConfig finetune_config(const TrainFlags& flags) {
  TrainConfig cfg;
  cfg.learning_rate = flags.lr;
  cfg.iterations = flags.iterations;
  cfg.batch_size = flags.batch;
  cfg.weight_decay = flags.weight_decay;
  cfg.seed = flags.seed;
  return cfg;
}

int run_train(const TrainFlags& flags) {
  if (!fs::exists(fs::path(flags.dataset) / "manifest.json")) {
    throw SpecError("dataset not found: " + flags.dataset);
  }
  const Dataset ds = load_dataset(flags.dataset);
  const bool use_defpool = parse_on_off(flags.defpool, "--defpool");
  const bool use_rejection = parse_on_off(flags.rejection, "--rejection");
  const PretrainScheme scheme = scheme_from_name(flags.scheme);

  Rejector rejector;
  if (use_rejection) rejector.fit(ds.train, {}, SvmConfig{.seed = flags.seed});

  NetConfig ncfg = detector_net_config(ds, use_defpool, flags.seed);
  TrainConfig fine_cfg = finetune_config(flags);
  TrainConfig pre_cfg = fine_cfg;
  pre_cfg.iterations = flags.pre_iterations;
  pre_cfg.seed = flags.seed + 1;

  Network net = pretrain_then_finetune(ds, scheme, ncfg, pre_cfg, fine_cfg, {},
                                       use_rejection ? &rejector : nullptr,
                                       use_rejection ? flags.keep_fraction : 1.0);
  net.save(flags.out);

  // record the training-time pipeline choices next to the checkpoint
  json extras;
  extras["scheme"] = flags.scheme;
  extras["defpool"] = use_defpool;
  extras["rejection"] = use_rejection;
  extras["keep_fraction"] = flags.keep_fraction;
  {
    std::ofstream os(fs::path(flags.out) / "training.json");
    os << extras.dump(2) << "\n";
  }

  json metrics;
  metrics["command"] = "train";
  metrics["model"] = flags.out;
  metrics["scheme"] = flags.scheme;
  metrics["defpool"] = use_defpool;
  metrics["rejection"] = use_rejection;
  metrics["iterations"] = flags.iterations;
  metrics["seed"] = flags.seed;
  emit(metrics);
  std::cerr << "model written to " << flags.out << "\n";
  return kExitOk;
}

// --- eval ------------------------------------------------------------------------

struct EvalFlags {
  std::string dataset;
  std::string model;
  std::string split = "val";
  std::string rejection = "off";
  double keep_fraction = 0.3;
  std::string context = "off";
  std::string bbox_regress = "off";
  std::string dump;
  unsigned threads = 0;
  std::uint64_t seed = 1;
};

int run_eval(const EvalFlags& flags) {
  if (!fs::exists(fs::path(flags.dataset) / "manifest.json")) {
    throw SpecError("dataset not found: " + flags.dataset);
  }
  if (!fs::exists(fs::path(flags.model) / "manifest.json")) {
    throw SpecError("model not found: " + flags.model);
  }
  const Dataset ds = load_dataset(flags.dataset);
  Network net = Network::load(flags.model);
  const std::size_t classes = static_cast<std::size_t>(ds.spec.classes);
  const std::size_t warp = net.config().input_size;

  const bool use_rejection = parse_on_off(flags.rejection, "--rejection");
  const bool use_context = parse_on_off(flags.context, "--context");
  const bool use_regress = parse_on_off(flags.bbox_regress, "--bbox-regress");

  EvalComponents comp;
  PipelineOptions opt;
  opt.threads = flags.threads;
  if (use_rejection) {
    comp.rejector.fit(ds.train, {}, SvmConfig{.seed = flags.seed});
    opt.rejector = &comp.rejector;
    opt.keep_fraction = flags.keep_fraction;
  }
  if (use_context) {
    auto [val1, val2] = split_val(ds);
    std::vector<Detection> val1_dets =
        detect_scenes(net, val1, {}, opt.rejector, opt.keep_fraction, warp, flags.threads);
    comp.context.fit(ds.train, ds.themes, val1, val1_dets, classes,
                     SvmConfig{.seed = flags.seed + 5}, SvmConfig{.seed = flags.seed + 6});
    opt.context = &comp.context;
  }
  if (use_regress) {
    comp.regressor.fit(net, ds.train, classes, {}, warp);
    opt.regressor = &comp.regressor;
  }

  const std::vector<SyntheticScene> scenes = pick_split(ds, flags.split);

  if (!flags.dump.empty()) {
    std::vector<Detection> dets =
        detect_scenes(net, scenes, {}, opt.rejector, opt.keep_fraction, warp, flags.threads);
    if (opt.context != nullptr) opt.context->apply(dets, scenes);
    std::ofstream os(flags.dump);
    for (const Detection& d : dets) {
      const std::vector<double>& final_scores = d.final_scores();
      std::size_t best = 0;
      for (std::size_t k = 1; k < final_scores.size(); ++k) {
        if (final_scores[k] > final_scores[best]) best = k;
      }
      json line;
      line["scene"] = d.scene;
      line["box"] = {d.box.x, d.box.y, d.box.w, d.box.h};
      line["class"] = best;
      line["score"] = d.scores[best];
      line["refined_score"] = final_scores[best];
      os << line.dump() << "\n";
    }
  }

  const EvalResult res = evaluate_detector(net, scenes, classes, {}, warp, opt);
  json metrics;
  metrics["command"] = "eval";
  metrics["split"] = flags.split;
  metrics["rejection"] = use_rejection;
  metrics["context"] = use_context;
  metrics["bbox_regress"] = use_regress;
  metrics["result"] = eval_to_json(res);
  emit(metrics);
  std::cerr << "mAP(" << flags.split << ") = " << res.map << "\n";
  return kExitOk;
}

// --- ensemble ----------------------------------------------------------------------

struct EnsembleFlags {
  std::string dataset;
  std::vector<std::string> models;
  std::string rejection = "off";
  double keep_fraction = 0.3;
  unsigned threads = 0;
  std::uint64_t seed = 1;
};

int run_ensemble(const EnsembleFlags& flags) {
  if (!fs::exists(fs::path(flags.dataset) / "manifest.json")) {
    throw SpecError("dataset not found: " + flags.dataset);
  }
  if (flags.models.size() < 2) throw SpecError("ensemble needs at least two --models");
  const Dataset ds = load_dataset(flags.dataset);
  const std::size_t classes = static_cast<std::size_t>(ds.spec.classes);

  Rejector rejector;
  const Rejector* rej = nullptr;
  double keep = 1.0;
  if (parse_on_off(flags.rejection, "--rejection")) {
    rejector.fit(ds.train, {}, SvmConfig{.seed = flags.seed});
    rej = &rejector;
    keep = flags.keep_fraction;
  }

  auto [val1, val2] = split_val(ds);
  std::vector<std::vector<Detection>> per_model;
  std::size_t warp = 20;
  for (const std::string& dir : flags.models) {
    if (!fs::exists(fs::path(dir) / "manifest.json")) throw SpecError("model not found: " + dir);
    Network net = Network::load(dir);
    warp = net.config().input_size;
    per_model.push_back(detect_scenes(net, val2, {}, rej, keep, warp, flags.threads));
  }

  const EnsembleSelection sel = greedy_ensemble(per_model, ground_truth_of(val2), classes);

  double best_single = 0.0;
  for (double v : sel.single_maps) best_single = std::max(best_single, v);

  json metrics;
  metrics["command"] = "ensemble";
  json selected = json::array();
  for (int idx : sel.selected) selected.push_back(flags.models[idx]);
  metrics["selected"] = selected;
  metrics["selected_indices"] = sel.selected;
  metrics["single_maps"] = sel.single_maps;
  metrics["best_single_map"] = best_single;
  metrics["ensemble_map"] = sel.ensemble_map;
  metrics["ensemble_not_below_best_single"] = sel.ensemble_map >= best_single;
  emit(metrics);
  std::cerr << "ensemble mAP " << sel.ensemble_map << " vs best single " << best_single << " ("
            << sel.selected.size() << " models)\n";
  return kExitOk;
}

// --- ablate ------------------------------------------------------------------------

struct AblateFlags {
  std::string dataset;
  std::size_t seeds = 5;
  std::size_t iterations = 300;
  std::size_t pre_iterations = 200;
  std::size_t batch = 16;
  double lr = 0.01;
  double keep_fraction = 0.3;
  unsigned threads = 0;
  std::uint64_t seed = 1;
};

int run_ablate(const AblateFlags& flags) {
  if (!fs::exists(fs::path(flags.dataset) / "manifest.json")) {
    throw SpecError("dataset not found: " + flags.dataset);
  }
  const Dataset ds = load_dataset(flags.dataset);
  const std::size_t classes = static_cast<std::size_t>(ds.spec.classes);
  auto [val1, val2] = split_val(ds);
  const std::size_t warp = 20;

  const std::vector<std::string> step_names = {"baseline_maxpool", "+rejection",
                                               "+object_pretrain", "+defpool", "+context",
                                               "+bbox_regression"};
  std::vector<std::vector<double>> step_maps(step_names.size());

  for (std::size_t s = 0; s < flags.seeds; ++s) {
    const std::uint64_t seed = flags.seed + s;
    TrainConfig fine;
    fine.learning_rate = flags.lr;
    fine.iterations = flags.iterations;
    fine.batch_size = flags.batch;
    fine.seed = seed;
    TrainConfig pre = fine;
    pre.iterations = flags.pre_iterations;
    pre.seed = seed + 1;

    Rejector rejector;
    rejector.fit(ds.train, {}, SvmConfig{.seed = seed});

    // step 0: plain max-pool network, raw proposals
    Network baseline = pretrain_then_finetune(ds, PretrainScheme::kNone,
                                              detector_net_config(ds, false, seed), pre, fine);
    PipelineOptions plain;
    plain.threads = flags.threads;
    step_maps[0].push_back(evaluate_detector(baseline, val2, classes, {}, warp, plain).map);

    // step 1: + bounding box rejection (training samples and eval both filtered)
    Network rej_net = pretrain_then_finetune(ds, PretrainScheme::kNone,
                                             detector_net_config(ds, false, seed), pre, fine, {},
                                             &rejector, flags.keep_fraction);
    PipelineOptions rej_opt = plain;
    rej_opt.rejector = &rejector;
    rej_opt.keep_fraction = flags.keep_fraction;
    step_maps[1].push_back(evaluate_detector(rej_net, val2, classes, {}, warp, rej_opt).map);

    // step 2: + object-level pretraining
    Network pre_net = pretrain_then_finetune(ds, PretrainScheme::kObjectLevel,
                                             detector_net_config(ds, false, seed), pre, fine, {},
                                             &rejector, flags.keep_fraction);
    step_maps[2].push_back(evaluate_detector(pre_net, val2, classes, {}, warp, rej_opt).map);

    // step 3: + def-pooling branches
    Network def_net = pretrain_then_finetune(ds, PretrainScheme::kObjectLevel,
                                             detector_net_config(ds, true, seed), pre, fine, {},
                                             &rejector, flags.keep_fraction);
    step_maps[3].push_back(evaluate_detector(def_net, val2, classes, {}, warp, rej_opt).map);

    // step 4: + context refinement (trained on the val1 half)
    ContextRefiner context;
    std::vector<Detection> val1_dets =
        detect_scenes(def_net, val1, {}, &rejector, flags.keep_fraction, warp, flags.threads);
    context.fit(ds.train, ds.themes, val1, val1_dets, classes, SvmConfig{.seed = seed + 5},
                SvmConfig{.seed = seed + 6});
    PipelineOptions ctx_opt = rej_opt;
    ctx_opt.context = &context;
    step_maps[4].push_back(evaluate_detector(def_net, val2, classes, {}, warp, ctx_opt).map);

    // step 5: + bounding box regression
    BboxRegressor regressor;
    regressor.fit(def_net, ds.train, classes, {}, warp);
    PipelineOptions full_opt = ctx_opt;
    full_opt.regressor = &regressor;
    step_maps[5].push_back(evaluate_detector(def_net, val2, classes, {}, warp, full_opt).map);
  }

  json steps = json::array();
  std::vector<double> means;
  for (std::size_t i = 0; i < step_names.size(); ++i) {
    double mean = 0.0;
    for (double v : step_maps[i]) mean += v;
    mean /= static_cast<double>(step_maps[i].size());
    means.push_back(mean);
    steps.push_back({{"step", step_names[i]}, {"per_seed_map", step_maps[i]}, {"mean_map", mean}});
  }

  json metrics;
  metrics["command"] = "ablate";
  metrics["seeds"] = flags.seeds;
  metrics["steps"] = steps;
  metrics["baseline_mean_map"] = means.front();
  metrics["final_mean_map"] = means.back();
  metrics["final_not_below_baseline"] = means.back() >= means.front();
  emit(metrics);

  std::cerr << "component ladder (mean over " << flags.seeds << " seeds):\n";
  for (std::size_t i = 0; i < step_names.size(); ++i) {
    std::fprintf(stderr, "  %-18s %.4f\n", step_names[i].c_str(), means[i]);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deformation-constrained pooling detector toolkit"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("--config", config_path, "JSON file supplying default flag values");

  json cfg;
  try {
    cfg = load_config_defaults(argc, argv);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  // gen
  DatasetSpec gen_spec;
  std::string gen_out = "dataset";
  int gen_scenes = 200, gen_val_scenes = 100;
  CLI::App* gen = app.add_subcommand("gen", "generate a synthetic detection dataset");
  gen->add_option("--config", config_path, "JSON file supplying default flag values");
  bind_option(gen, cfg, "--out", gen_out, "output dataset directory");
  bind_option(gen, cfg, "--classes", gen_spec.classes, "number of object classes");
  bind_option(gen, cfg, "--scenes", gen_scenes, "training scenes");
  bind_option(gen, cfg, "--val-scenes", gen_val_scenes, "validation scenes");
  bind_option(gen, cfg, "--image-size", gen_spec.image_size, "scene side length");
  bind_option(gen, cfg, "--amplitude", gen_spec.amplitude, "deformation amplitude in pixels");
  bind_option(gen, cfg, "--min-objects", gen_spec.min_objects, "min objects per scene");
  bind_option(gen, cfg, "--max-objects", gen_spec.max_objects, "max objects per scene");
  bind_option(gen, cfg, "--theme-fidelity", gen_spec.theme_fidelity,
              "probability that the theme follows the first object");
  bind_option(gen, cfg, "--seed", gen_spec.seed, "generator seed");

  // gradcheck
  double gc_eps = 1e-5;
  std::uint64_t gc_seed = 1;
  bool gc_corrupt = false;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  gradcheck->add_option("--config", config_path, "JSON file supplying default flag values");
  bind_option(gradcheck, cfg, "--eps", gc_eps, "finite-difference step");
  bind_option(gradcheck, cfg, "--seed", gc_seed, "seed");
  gradcheck->add_flag("--corrupt-backward", gc_corrupt,
                      "negative-control fixture: corrupt one analytic gradient")
      ->group("");  // hidden

  // train
  TrainFlags train_flags;
  CLI::App* train_cmd = app.add_subcommand("train", "train a detector");
  train_cmd->add_option("--config", config_path, "JSON file supplying default flag values");
  bind_option(train_cmd, cfg, "--dataset", train_flags.dataset, "dataset directory");
  bind_option(train_cmd, cfg, "--out", train_flags.out, "output model directory");
  bind_option(train_cmd, cfg, "--scheme", train_flags.scheme,
              "pretraining scheme: none, image or object");
  bind_switch(train_cmd, cfg, "--defpool", train_flags.defpool, "def-pooling branches");
  bind_switch(train_cmd, cfg, "--rejection", train_flags.rejection, "bounding box rejection");
  bind_option(train_cmd, cfg, "--keep-fraction", train_flags.keep_fraction,
              "fraction of proposals kept by rejection");
  bind_option(train_cmd, cfg, "--iterations", train_flags.iterations, "fine-tuning iterations");
  bind_option(train_cmd, cfg, "--pre-iterations", train_flags.pre_iterations,
              "pretraining iterations");
  bind_option(train_cmd, cfg, "--batch", train_flags.batch, "batch size");
  bind_option(train_cmd, cfg, "--lr", train_flags.lr, "initial learning rate");
  bind_option(train_cmd, cfg, "--weight-decay", train_flags.weight_decay, "L2 weight decay");
  bind_option(train_cmd, cfg, "--seed", train_flags.seed, "training seed");

  // eval
  EvalFlags eval_flags;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a detector");
  eval_cmd->add_option("--config", config_path, "JSON file supplying default flag values");
  bind_option(eval_cmd, cfg, "--dataset", eval_flags.dataset, "dataset directory");
  bind_option(eval_cmd, cfg, "--model", eval_flags.model, "model directory");
  bind_option(eval_cmd, cfg, "--split", eval_flags.split, "train, val, val1 or val2");
  bind_switch(eval_cmd, cfg, "--rejection", eval_flags.rejection, "bounding box rejection");
  bind_option(eval_cmd, cfg, "--keep-fraction", eval_flags.keep_fraction,
              "fraction kept by rejection");
  bind_switch(eval_cmd, cfg, "--context", eval_flags.context, "context score refinement");
  bind_switch(eval_cmd, cfg, "--bbox-regress", eval_flags.bbox_regress, "bounding box regression");
  bind_option(eval_cmd, cfg, "--dump", eval_flags.dump, "write detections as JSON lines");
  bind_option(eval_cmd, cfg, "--threads", eval_flags.threads, "scoring threads (0 = auto)");
  bind_option(eval_cmd, cfg, "--seed", eval_flags.seed, "component training seed");

  // ensemble
  EnsembleFlags ens_flags;
  CLI::App* ens_cmd = app.add_subcommand("ensemble", "greedy model averaging on val2");
  ens_cmd->add_option("--config", config_path, "JSON file supplying default flag values");
  bind_option(ens_cmd, cfg, "--dataset", ens_flags.dataset, "dataset directory");
  bind_option(ens_cmd, cfg, "--models", ens_flags.models, "candidate model directories");
  bind_switch(ens_cmd, cfg, "--rejection", ens_flags.rejection, "bounding box rejection");
  bind_option(ens_cmd, cfg, "--keep-fraction", ens_flags.keep_fraction,
              "fraction kept by rejection");
  bind_option(ens_cmd, cfg, "--threads", ens_flags.threads, "scoring threads (0 = auto)");
  bind_option(ens_cmd, cfg, "--seed", ens_flags.seed, "component training seed");

  // ablate
  AblateFlags abl_flags;
  CLI::App* abl_cmd = app.add_subcommand("ablate", "component ladder on val2");
  abl_cmd->add_option("--config", config_path, "JSON file supplying default flag values");
  bind_option(abl_cmd, cfg, "--dataset", abl_flags.dataset, "dataset directory");
  bind_option(abl_cmd, cfg, "--seeds", abl_flags.seeds, "number of seeds to average");
  bind_option(abl_cmd, cfg, "--iterations", abl_flags.iterations, "fine-tuning iterations");
  bind_option(abl_cmd, cfg, "--pre-iterations", abl_flags.pre_iterations,
              "pretraining iterations");
  bind_option(abl_cmd, cfg, "--batch", abl_flags.batch, "batch size");
  bind_option(abl_cmd, cfg, "--lr", abl_flags.lr, "initial learning rate");
  bind_option(abl_cmd, cfg, "--keep-fraction", abl_flags.keep_fraction,
              "fraction kept by rejection");
  bind_option(abl_cmd, cfg, "--threads", abl_flags.threads, "scoring threads (0 = auto)");
  bind_option(abl_cmd, cfg, "--seed", abl_flags.seed, "base seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      gen_spec.train_scenes = gen_scenes;
      gen_spec.val_scenes = gen_val_scenes;
      return run_gen(gen_spec, gen_out);
    }
    if (gradcheck->parsed()) return run_gradcheck(gc_eps, gc_seed, gc_corrupt);
    if (train_cmd->parsed()) return run_train(train_flags);
    if (eval_cmd->parsed()) return run_eval(eval_flags);
    if (ens_cmd->parsed()) return run_ensemble(ens_flags);
    if (abl_cmd->parsed()) return run_ablate(abl_flags);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
