// Command-line front end: train, eval, flops, visualize, stats-dump,
// compare-baseline and ablate.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "spot/spot.hpp"

namespace fs = std::filesystem;
using namespace spot;

namespace {

struct CommonArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string out = "spot_out";
  std::string seed;
};

struct Context {
  ConfigTable table;
  RunConfig rc;
  fs::path out;
};

Context prepare(const CommonArgs& args) {
  Context ctx;
  std::vector<std::string> overrides = args.overrides;
  if (!args.seed.empty()) overrides.push_back("seed=" + args.seed);
  ctx.table = parse_config(args.config, overrides);
  ctx.rc = resolve(ctx.table);
  ctx.out = args.out;
  fs::create_directories(ctx.out);
  detail::write_file((ctx.out / "config.resolved").string(), ctx.table.echo());
  return ctx;
}

void write_text(const fs::path& path, const std::string& text) { detail::write_file(path.string(), text); }

Dataset train_set(const RunConfig& rc) {
  return rc.train_data_path.empty() ? generate(rc.train_data)
                                    : load_dataset(rc.train_data_path, rc.vit.image_size, rc.vit.channels);
}

Dataset test_set(const RunConfig& rc) {
  return rc.test_data_path.empty() ? generate(rc.test_data)
                                   : load_dataset(rc.test_data_path, rc.vit.image_size, rc.vit.channels);
}

struct Model {
  VisionTransformer vit;
  PredictorBank bank;

  ParamList parameters() const {
    ParamList all = vit.parameters();
    ParamList pred = bank.parameters();
    all.insert(all.end(), pred.begin(), pred.end());
    return all;
  }
};

Model fresh_model(const RunConfig& rc) {
  return Model{VisionTransformer(rc.vit, rc.seed),
               PredictorBank(rc.predictor, rc.sparsify.stages(), rc.vit.embed_dim, rc.vit.heads, rc.seed + 1)};
}

std::string checkpoint_path(const Context& ctx) {
  return ctx.rc.checkpoint.empty() ? (ctx.out / "model.ckpt").string() : ctx.rc.checkpoint;
}

Model load_model(const Context& ctx) {
  Model m = fresh_model(ctx.rc);
  load_into(read_checkpoint(checkpoint_path(ctx)), m.parameters());
  return m;
}

/// Dense backbone from teacher_checkpoint, or pretrained from scratch.
VisionTransformer dense_backbone(const Context& ctx, const Dataset& train) {
  VisionTransformer vit(ctx.rc.vit, ctx.rc.seed);
  if (!ctx.rc.teacher_checkpoint.empty()) {
    load_into(read_checkpoint(ctx.rc.teacher_checkpoint), vit.parameters());
    return vit;
  }
  std::ofstream log(ctx.out / "pretrain_log.csv", std::ios::binary | std::ios::trunc);
  pretrain(vit, train, ctx.rc.train, &log);
  save_checkpoint((ctx.out / "teacher.ckpt").string(), vit.parameters());
  return vit;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

int cmd_train(const Context& ctx) {
  const RunConfig& rc = ctx.rc;
  const Dataset train = train_set(rc), test = test_set(rc);
  VisionTransformer vit = dense_backbone(ctx, train);
  const EvalResult dense = evaluate(vit, nullptr, test, EvalMode::dense);
  std::cout << "dense accuracy " << fixed(dense.accuracy) << "\n";

  Teacher teacher(vit);
  Model m{std::move(vit), PredictorBank(rc.predictor, rc.sparsify.stages(), rc.vit.embed_dim, rc.vit.heads, rc.seed + 1)};
  std::ofstream log(ctx.out / "train_log.csv", std::ios::binary | std::ios::trunc);
  try {
    finetune(m.vit, m.bank, teacher, train, rc.sparsify, rc.train, &log);
  } catch (const NumericError&) {
    save_checkpoint(checkpoint_path(ctx), m.parameters());
    throw;
  }
  save_checkpoint(checkpoint_path(ctx), m.parameters());

  const EvalResult sparse = evaluate(m.vit, &m.bank, test, EvalMode::spot, rc.sparsify);
  const double reduction = 1.0 - static_cast<double>(sparse.flops.total) / static_cast<double>(dense.flops.total);
  std::ostringstream metrics;
  metrics << "model,accuracy,gflops,reduction\n"
          << "dense," << fmt_num(dense.accuracy) << ',' << fmt_num(dense.flops.giga()) << ",0.00000000\n"
          << "spot," << fmt_num(sparse.accuracy) << ',' << fmt_num(sparse.flops.giga()) << ',' << fmt_num(reduction) << '\n';
  write_text(ctx.out / "metrics.csv", metrics.str());
  std::cout << "spot accuracy " << fixed(sparse.accuracy) << ", " << fixed(100.0 * reduction, 2)
            << "% fewer multiply-accumulates than dense\n";
  return 0;
}

int cmd_eval(const Context& ctx) {
  const RunConfig& rc = ctx.rc;
  const Model m = load_model(ctx);
  const Dataset test = test_set(rc);
  double accuracy = 0.0;
  FlopReport cost;
  if (rc.sparsify.mode == EngineMode::training && rc.scorer == EvalMode::spot) {
    // Masked forward with hard Gumbel samples at the final temperature.
    Rng rng(rc.seed);
    EngineOptions opt;
    opt.gumbel = rc.train.gumbel;
    opt.gumbel.tau = rc.train.gumbel.tau_final;
    opt.rng = &rng;
    SparsifyConfig sp = rc.sparsify;
    std::size_t correct = 0;
    NoGradScope ng;
    for (const auto& s : test) {
      SpotScorer scorer(m.bank, rc.vit.heads);
      correct += argmax(run(s.image, m.vit, scorer, sp, opt).logits) == s.label;
    }
    accuracy = test.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(test.size());
    cost = model_cost(rc.vit, RetentionPlan::dense());
  } else {
    const EvalResult r = evaluate(m.vit, &m.bank, test, rc.scorer, rc.sparsify);
    accuracy = r.accuracy;
    cost = r.flops;
  }
  const std::string name = ctx.table.get("scorer");
  write_text(ctx.out / "eval.csv", "scorer,mode,samples,accuracy,gflops\n" + name + ',' + ctx.table.get("mode") + ',' +
                                       std::to_string(test.size()) + ',' + fmt_num(accuracy) + ',' + fmt_num(cost.giga()) + '\n');
  std::cout << name << " accuracy " << fixed(accuracy) << " on " << test.size() << " images, " << fixed(cost.giga(), 6)
            << " G multiply-accumulates per image\n";
  return 0;
}

int cmd_flops(const Context& ctx) {
  const RunConfig& rc = ctx.rc;
  const FlopReport dense = model_cost(rc.vit, RetentionPlan::dense());
  FlopReport report = dense;
  if (rc.scorer != EvalMode::dense && rc.sparsify.stages() > 0) {
    RetentionPlan plan = RetentionPlan::sparsified(rc.vit, rc.sparsify.rho, rc.sparsify.stage_layers, rc.predictor);
    plan.with_predictor = rc.scorer == EvalMode::spot;
    report = model_cost(rc.vit, plan);
  }
  std::cout << format_report(report);
  std::cout << "dense      " << dense.total << " (" << fixed(dense.giga(), 6) << " G), reduction "
            << fixed(100.0 * (1.0 - static_cast<double>(report.total) / static_cast<double>(dense.total)), 2) << "%\n";
  if (rc.flops_csv) write_text(ctx.out / "flops.csv", report_csv(report));
  return 0;
}

std::vector<std::vector<bool>> masks_for(const Model& m, const RunConfig& rc, const Image& image) {
  NoGradScope ng;
  SparsifyConfig sp = rc.sparsify;
  sp.mode = EngineMode::inference;
  if (sp.stages() == 0 || rc.scorer == EvalMode::dense) return {};
  EngineResult r;
  if (rc.scorer == EvalMode::heuristic) {
    HeuristicScorer scorer;
    r = run(image, m.vit, scorer, sp);
  } else {
    SpotScorer scorer(m.bank, rc.vit.heads);
    r = run(image, m.vit, scorer, sp);
  }
  return r.retention.masks;
}

int cmd_visualize(const Context& ctx) {
  const RunConfig& rc = ctx.rc;
  const Model m = load_model(ctx);
  const Dataset test = test_set(rc);
  const std::size_t n = std::min(rc.visualize_samples, test.size());
  MaskOverlay overlay{rc.shades};
  for (std::size_t i = 0; i < n; ++i) {
    const auto masks = masks_for(m, rc, test[i].image);
    const fs::path path = ctx.out / ("overlay_" + std::to_string(i) + ".ppm");
    write_text(path, render_overlay(test[i].image, rc.vit.patch_size, masks, overlay));
    std::cout << path.string() << " label " << test[i].label << "\n";
  }
  return 0;
}

int cmd_stats_dump(const Context& ctx) {
  const RunConfig& rc = ctx.rc;
  const Model m = load_model(ctx);
  const Dataset test = test_set(rc);
  if (rc.stats_sample >= test.size()) throw ConfigError("stats_sample is beyond the evaluation set");
  NoGradScope ng;
  const VisionTransformer::ForwardResult f = m.vit.forward(test[rc.stats_sample].image);
  const Spread spread = rc.predictor.spread;
  const auto& cols = descriptor_column_names();
  std::ostringstream csv;
  csv << "layer,token";
  for (const char* src : {"A", "M", "S"})
    for (std::size_t h = 0; h < rc.vit.heads; ++h)
      for (const auto& c : cols) csv << ',' << src << "_h" << h << '_' << c;
  csv << '\n' << std::setprecision(17);
  CrossLayerAccumulator acc(rc.vit.heads);
  for (std::size_t l = 0; l < f.maps.size(); ++l) {
    acc.accumulate(f.maps[l]);
    const SourceDescriptors d = extract_descriptors(f.maps[l], acc, spread);
    const std::size_t n = d.A.front().dim(0);
    for (std::size_t t = 0; t < n; ++t) {
      csv << l + 1 << ',' << t + 1;
      for (const auto* src : {&d.A, &d.M, &d.S})
        for (const Tensor& desc : *src)
          for (std::size_t c = 0; c < kDescriptorColumns; ++c) csv << ',' << desc.at(t, c);
      csv << '\n';
    }
  }
  write_text(ctx.out / "stats.csv", csv.str());
  std::cout << "wrote " << (ctx.out / "stats.csv").string() << " (" << f.maps.size() << " layers)\n";
  return 0;
}

double jaccard(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::vector<std::size_t> inter, uni;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(uni));
  return uni.empty() ? 1.0 : static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

int cmd_compare(const Context& ctx) {
  const RunConfig& rc = ctx.rc;
  const Model m = load_model(ctx);
  const Dataset test = test_set(rc);
  SparsifyConfig sp = rc.sparsify;
  sp.mode = EngineMode::inference;
  if (sp.stages() == 0) throw ConfigError("compare-baseline needs at least one stage");
  NoGradScope ng;
  std::vector<double> mean(sp.stages(), 0.0);
  std::size_t spot_correct = 0, heur_correct = 0;
  std::ostringstream csv;
  csv << "sample,stage,jaccard\n";
  for (std::size_t i = 0; i < test.size(); ++i) {
    SpotScorer ss(m.bank, rc.vit.heads);
    HeuristicScorer hs;
    const EngineResult a = run(test[i].image, m.vit, ss, sp);
    const EngineResult b = run(test[i].image, m.vit, hs, sp);
    spot_correct += argmax(a.logits) == test[i].label;
    heur_correct += argmax(b.logits) == test[i].label;
    for (std::size_t k = 0; k < sp.stages(); ++k) {
      const double j = jaccard(a.retention.kept_indices[k], b.retention.kept_indices[k]);
      mean[k] += j;
      csv << i << ',' << k + 1 << ',' << fmt_num(j) << '\n';
    }
  }
  write_text(ctx.out / "compare.csv", csv.str());
  const double n = static_cast<double>(std::max<std::size_t>(test.size(), 1));
  std::ostringstream summary;
  summary << "stage,mean_jaccard\n";
  for (std::size_t k = 0; k < mean.size(); ++k) {
    summary << k + 1 << ',' << fmt_num(mean[k] / n) << '\n';
    std::cout << "stage " << k + 1 << " mean Jaccard overlap " << fixed(mean[k] / n) << "\n";
  }
  write_text(ctx.out / "compare_summary.csv", summary.str());
  std::cout << "accuracy spot " << fixed(spot_correct / n) << ", heuristic " << fixed(heur_correct / n) << "\n";
  return 0;
}

PredictorConfig variant_config(const std::string& name, PredictorConfig base) {
  if (name == "full") return base;
  if (name == "no_mu") base.include_mu = false;
  else if (name == "no_sigma") base.include_sigma = false;
  else if (name == "no_M_Sigma") base.include_M = base.include_Sigma = false;
  else if (name == "head_avg") base.per_head = false;
  else if (name == "shared") base.shared_across_stages = true;
  else if (name == "no_stats") base.include_A = base.include_M = base.include_Sigma = false;
  else if (name.rfind("d_remap_", 0) == 0) base.d_remap = detail::parse_uint(name.substr(8), "ablation variant " + name);
  else throw ConfigError("unknown ablation variant '" + name + "'");
  base.validate();
  return base;
}

int cmd_ablate(const Context& ctx) {
  const RunConfig& rc = ctx.rc;
  if (rc.ablate_variants.empty()) throw ConfigError("ablate_variants is empty");
  std::vector<PredictorConfig> variants;
  for (const auto& v : rc.ablate_variants) variants.push_back(variant_config(v, rc.predictor));

  const Dataset train = train_set(rc), test = test_set(rc);
  const VisionTransformer dense = dense_backbone(ctx, train);
  const Teacher teacher(dense);
  TrainConfig tc = rc.train;
  tc.epochs = rc.ablate_epochs;
  const ViTConfig deit = ViTConfig::deit_small();

  std::ostringstream csv, table;
  csv << "variant,accuracy,gflops,predictor_gflops,deit_s_predictor_gflops\n";
  table << std::left << std::setw(14) << "variant" << std::right << std::setw(10) << "accuracy" << std::setw(12) << "GMAC"
        << std::setw(14) << "predictor" << std::setw(16) << "DeiT-S pred." << '\n';
  for (std::size_t i = 0; i < variants.size(); ++i) {
    VisionTransformer student = dense.clone();
    PredictorBank bank(variants[i], rc.sparsify.stages(), rc.vit.embed_dim, rc.vit.heads, rc.seed + 1);
    finetune(student, bank, teacher, train, rc.sparsify, tc);
    const EvalResult r = evaluate(student, &bank, test, EvalMode::spot, rc.sparsify);
    PredictorConfig at_scale = variants[i];
    if (at_scale.d_remap > 0) at_scale.d_remap = deit.embed_dim;
    const FlopReport big = model_cost(deit, RetentionPlan::sparsified(deit, 0.7, quarter_mark_stages(deit.depth, 3), at_scale));
    const double pred = static_cast<double>(r.flops.predictor_total()) * 1e-9;
    const double big_pred = static_cast<double>(big.predictor_total()) * 1e-9;
    csv << rc.ablate_variants[i] << ',' << fmt_num(r.accuracy) << ',' << fmt_num(r.flops.giga()) << ',' << fmt_num(pred)
        << ',' << fmt_num(big_pred) << '\n';
    table << std::left << std::setw(14) << rc.ablate_variants[i] << std::right << std::setw(10) << fixed(r.accuracy)
          << std::setw(12) << fixed(r.flops.giga(), 6) << std::setw(14) << fixed(pred, 6) << std::setw(16)
          << fixed(big_pred, 4) << '\n';
  }
  write_text(ctx.out / "ablate.csv", csv.str());
  write_text(ctx.out / "ablate.txt", table.str());
  std::cout << table.str();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention-statistics token sparsification for vision transformers"};
  app.require_subcommand(1);

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Context&);
  };
  const std::vector<Command> commands = {
      {"train", "pretrain a dense model, then fine-tune it with token sparsification", cmd_train},
      {"eval", "accuracy and cost of a checkpoint on the evaluation set", cmd_eval},
      {"flops", "analytical multiply-accumulate report", cmd_flops},
      {"visualize", "PPM overlays of pruned patches", cmd_visualize},
      {"stats-dump", "attention descriptors of one image as CSV", cmd_stats_dump},
      {"compare-baseline", "retained-set overlap between the predictor and the attention heuristic", cmd_compare},
      {"ablate", "fine-tune and evaluate predictor variants", cmd_ablate},
  };

  CommonArgs args;
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", args.config, "key=value configuration file");
    sub->add_option("--set", args.overrides, "override KEY=VALUE (repeatable)")->allow_extra_args(false);
    sub->add_option("--out", args.out, "output directory")->capture_default_str();
    sub->add_option("--seed", args.seed, "random seed");
    subs.emplace_back(sub, &c);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    for (const auto& [sub, cmd] : subs) {
      if (sub->parsed()) return cmd->run(prepare(args));
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
