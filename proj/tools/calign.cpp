// Command-line front end: data generation, both training stages, evaluation,
// ablation, intervention and explanation export.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "calign/calign.hpp"
#include "calign/explain_io.hpp"

namespace fs = std::filesystem;
using namespace calign;

namespace {

constexpr const char* kConfigEnv = "CALIGN_CONFIG";

// One line per event on stderr: `<unix-seconds> <event> key=value ...`.
void log_event(const std::string& event, const std::vector<std::pair<std::string, std::string>>& fields = {}) {
  std::cerr << std::time(nullptr) << ' ' << event;
  for (const auto& [k, v] : fields) std::cerr << ' ' << k << '=' << v;
  std::cerr << '\n';
}

std::string num(double v) { return detail::fmt17(v); }

struct Globals {
  std::string config_path;
  std::string preset = "synthetic";
  std::vector<std::string> sets;
  std::uint64_t seed = 0;
  bool seed_given = false;
};

/// Preset, then config file, then --set overrides, then --seed.
TrainConfig resolve_config(const Globals& g) {
  TrainConfig base = g.preset == "paper" ? TrainConfig{} : TrainConfig::synthetic_preset();
  KeyValues kv;
  std::string path = g.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv(kConfigEnv)) path = env;
  }
  if (!path.empty()) kv = KeyValues::load(path);
  std::stringstream extra;
  for (const auto& s : g.sets) extra << s << '\n';
  kv.merge(KeyValues::parse(extra, "--set"));
  TrainConfig cfg = TrainConfig::from_kv(kv, base);
  if (g.seed_given) {
    cfg.seed = g.seed;
    cfg.data.synth.seed = g.seed;
  }
  cfg.validate();
  return cfg;
}

void snapshot(const TrainConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir);
  cfg.to_kv().save(dir / "resolved.cfg");
}

Dataset dataset_for(TrainConfig& cfg, const std::string& manifest) {
  if (!manifest.empty()) {
    cfg.data.source = "manifest";
    cfg.data.manifest = manifest;
  }
  return load_dataset(cfg.data, cfg.encoder.image_size, cfg.encoder.channels);
}

/// Checkpoint-based commands reuse the data spec stored with the checkpoint.
Dataset dataset_for(Checkpoint& ck, const std::string& manifest) { return dataset_for(ck.config, manifest); }

const ImageSample& find_sample(const Dataset& ds, const std::string& id) {
  for (const auto& s : ds.samples)
    if (s.id == id) return s;
  throw RequestError("no image with id " + id);
}

void print_prediction(const std::string& label, const Prediction& p, const Model& m) {
  std::cout << label << ": " << m.class_names.at(static_cast<std::size_t>(p.predicted_class)) << " (scores";
  for (Eigen::Index k = 0; k < p.concept_scores.size(); ++k) std::cout << ' ' << num(p.concept_scores(k));
  std::cout << ")\n";
}

InterventionRequest parse_overrides(const std::vector<std::string>& items) {
  InterventionRequest req;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--override", "expected k=v, got '" + item + "'");
    try {
      req.overrides[std::stoi(item.substr(0, eq))] = std::stod(item.substr(eq + 1));
    } catch (const std::logic_error&) {
      throw CLI::ValidationError("--override", "expected k=v, got '" + item + "'");
    }
  }
  return req;
}

Split split_flag(const std::string& s) {
  try {
    return parse_split(s);
  } catch (const Error&) {
    throw CLI::ValidationError("--split", "must be train, val or test");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept-aligned image encoder training and explainable diagnosis"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path,
                 std::string("key=value config file (default: $") + kConfigEnv + ")");
  app.add_option("--preset", g.preset, "base settings before the config file")
      ->check(CLI::IsMember({"synthetic", "paper"}));
  app.add_option("--set", g.sets, "override one config key (key=value), repeatable");
  auto* seed_opt = app.add_option("--seed", g.seed, "seed for every random stream");

  std::string out, ckpt, manifest, split = "test";
  std::vector<std::string> images, overrides, seeds_csv;
  double label_fraction = -1;
  bool direct = false, bottleneck = false, curve = false, overlay = false;
  std::vector<double> fractions{0.1, 0.25, 0.5, 1.0};
  std::vector<std::uint64_t> seeds{0, 1, 2};

  auto* synth = app.add_subcommand("synth-gen", "write a synthetic motif dataset (manifest + PNG images)");
  synth->add_option("--out", out, "output directory")->required();

  auto* align = app.add_subcommand("align", "stage 1: train the encoders on concept labels");
  align->add_option("--out", out, "checkpoint directory")->required();
  align->add_option("--manifest", manifest, "CSV manifest instead of synthetic data");

  auto* diag = app.add_subcommand("diagnose-train", "stage 2: train classification heads on a frozen encoder");
  diag->add_option("--ckpt", ckpt, "stage-1 checkpoint")->required();
  diag->add_option("--out", out, "output checkpoint directory")->required();
  diag->add_option("--manifest", manifest, "CSV manifest overriding the checkpoint's data");
  auto* bflag = diag->add_flag("--bottleneck", bottleneck, "concept bottleneck heads (default)");
  auto* dflag = diag->add_flag("--direct", direct, "direct classifier on image features");
  bflag->excludes(dflag);
  diag->add_option("--label-fraction", label_fraction, "stratified fraction of training labels in (0,1]")
      ->check(CLI::Range(0.0, 1.0));

  auto* eval = app.add_subcommand("eval", "metrics of a trained checkpoint");
  eval->add_option("--ckpt", ckpt, "trained checkpoint")->required();
  eval->add_option("--split", split, "train, val or test");
  eval->add_option("--manifest", manifest, "CSV manifest overriding the checkpoint's data");
  eval->add_option("--out", out, "directory for metrics.txt");

  auto* ablate = app.add_subcommand("ablate", "all six alignment-loss combinations over seeds");
  ablate->add_option("--out", out, "output directory")->required();
  ablate->add_option("--seeds", seeds, "seeds")->delimiter(',');
  ablate->add_option("--manifest", manifest, "CSV manifest instead of synthetic data");

  auto* eff = app.add_subcommand("efficiency", "stage-2 accuracy against label fraction");
  eff->add_option("--out", out, "output directory")->required();
  eff->add_option("--seeds", seeds, "seeds")->delimiter(',');
  eff->add_option("--fractions", fractions, "label fractions")->delimiter(',');
  eff->add_option("--manifest", manifest, "CSV manifest instead of synthetic data");

  auto* inter = app.add_subcommand("intervene", "test-time concept intervention");
  inter->add_option("--ckpt", ckpt, "bottleneck checkpoint")->required();
  inter->add_option("--image", images, "image id");
  inter->add_option("--override", overrides, "concept=value, repeatable")->take_all();
  inter->add_flag("--threshold-curve", curve, "accuracy while zeroing scores above each threshold");
  inter->add_option("--split", split, "split for --threshold-curve");
  inter->add_option("--out", out, "directory for curve.csv and curve.svg");
  inter->add_option("--manifest", manifest, "CSV manifest overriding the checkpoint's data");

  auto* expl = app.add_subcommand("explain", "concept contributions, sentence and localization maps");
  expl->add_option("--ckpt", ckpt, "bottleneck checkpoint")->required();
  expl->add_option("--image", images, "image id, repeatable (default: first 5 of --split)");
  expl->add_option("--split", split, "split to pick default images from");
  expl->add_option("--out", out, "output directory")->required();
  expl->add_flag("--overlay", overlay, "also write heat-map overlay PNGs");
  expl->add_option("--manifest", manifest, "CSV manifest overriding the checkpoint's data");

  auto* cavfit = app.add_subcommand("cav-fit", "refit concept activation vectors from a checkpoint's features");
  cavfit->add_option("--ckpt", ckpt, "checkpoint")->required();
  cavfit->add_option("--out", out, "output checkpoint directory")->required();
  cavfit->add_option("--manifest", manifest, "CSV manifest overriding the checkpoint's data");

  auto* cavexp = app.add_subcommand("cav-export", "write a checkpoint's concept vectors as TSV");
  cavexp->add_option("--ckpt", ckpt, "checkpoint")->required();
  cavexp->add_option("--out", out, "output file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << "\nRun with --help for usage.\n";
    return 2;
  }
  g.seed_given = seed_opt->count() > 0;

  try {
    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&] { return num(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()); };

    if (*synth) {
      auto cfg = resolve_config(g);
      auto synth_cfg = cfg.data.synth;
      synth_cfg.image_size = cfg.encoder.image_size;
      const auto ds = generate_synthetic(synth_cfg);
      write_manifest(out, ds);
      snapshot(cfg, out);
      log_event("synth-gen.done", {{"out", out}, {"samples", std::to_string(ds.samples.size())}});
    } else if (*align) {
      auto cfg = resolve_config(g);
      const auto ds = dataset_for(cfg, manifest);
      const auto train = ds.split(Split::Train);
      ConceptLabelView view(train);
      log_event("align.start", {{"train", std::to_string(train.size())}, {"epochs", std::to_string(cfg.stage1.epochs)}});
      auto ck = run_stage1(cfg, view, ds.vocab, ds.class_names, [&](const EpochRecord& r) {
        log_event("align.epoch", {{"epoch", std::to_string(r.epoch)}, {"ila", num(r.ila)}, {"tla", num(r.tla)},
                                  {"cla", num(r.cla)}, {"total", num(r.total)},
                                  {"fitted_cavs", std::to_string(r.fitted_concepts)}, {"elapsed_s", elapsed()}});
      });
      save_checkpoint(ck, out);
      snapshot(cfg, out);
      log_event("align.done", {{"ckpt", out}});
    } else if (*diag) {
      auto base = load_checkpoint(ckpt);
      auto cfg = base.config;
      // Stage-2 keys from --config/--set apply on top of the checkpoint's config.
      const auto requested = resolve_config(g);
      cfg.stage2 = requested.stage2;
      if (direct) cfg.stage2.bottleneck = false;
      if (bottleneck) cfg.stage2.bottleneck = true;
      if (label_fraction >= 0) {
        if (label_fraction == 0) throw CLI::ValidationError("--label-fraction", "must be > 0");
        cfg.stage2.label_fraction = label_fraction;
      }
      if (g.seed_given) cfg.seed = g.seed;
      base.config.seed = cfg.seed;
      const auto ds = dataset_for(cfg, manifest);
      auto ck = run_stage2(base, cfg, ds.split(Split::Train));
      ck.config = cfg;
      save_checkpoint(ck, out);
      snapshot(cfg, out);
      log_event("diagnose-train.done", {{"ckpt", out}, {"head", cfg.stage2.bottleneck ? "bottleneck" : "direct"},
                                        {"label_fraction", num(cfg.stage2.label_fraction)}, {"elapsed_s", elapsed()}});
    } else if (*eval) {
      auto ck = load_checkpoint(ckpt);
      const auto which = split_flag(split);
      const auto ds = dataset_for(ck, manifest);
      const auto r = evaluate(ck.model, ds.split(which));
      const auto text = format_report(r);
      std::cout << text;
      if (!out.empty()) {
        snapshot(ck.config, out);
        std::ofstream(fs::path(out) / "metrics.txt") << "# split=" << split << " (percent; macro over classes)\n" << text;
      }
    } else if (*ablate) {
      auto cfg = resolve_config(g);
      const auto ds = dataset_for(cfg, manifest);
      const auto rows = run_ablation(cfg, ds, seeds, [](const std::string& m) { log_event("ablate.run", {{"run", '"' + m + '"'}}); });
      fs::create_directories(out);
      write_ablation_csv(fs::path(out) / "ablation.csv", rows);
      snapshot(cfg, out);
      for (const auto& r : rows) {
        std::cout << r.variant.name << " AUC_D " << num(r.diagnosis().mean) << " +- " << num(r.diagnosis().std)
                  << " AUC_C " << num(r.concepts().mean) << " +- " << num(r.concepts().std) << '\n';
      }
    } else if (*eff) {
      auto cfg = resolve_config(g);
      for (double f : fractions) {
        if (!(f > 0.0 && f <= 1.0)) throw CLI::ValidationError("--fractions", "values must lie in (0,1]");
      }
      const auto ds = dataset_for(cfg, manifest);
      const auto rows = run_efficiency(cfg, ds, fractions, seeds);
      fs::create_directories(out);
      write_efficiency_csv(fs::path(out) / "efficiency.csv", rows);
      snapshot(cfg, out);
      for (const auto& r : rows) {
        std::cout << num(r.fraction) << " acc " << num(r.accuracy().mean) << " +- " << num(r.accuracy().std) << '\n';
      }
    } else if (*inter) {
      auto ck = load_checkpoint(ckpt);
      if (!ck.model.heads) throw RequestError("intervention needs a bottleneck checkpoint");
      const auto ds = dataset_for(ck, manifest);
      if (!curve && images.empty()) throw CLI::ValidationError("--image", "required unless --threshold-curve is given");
      const auto req = parse_overrides(overrides);
      for (const auto& id : images) {
        const auto& s = find_sample(ds, id);
        const auto base = predict(*ck.model.heads, ck.model.image, s.image);
        const auto after = predict(*ck.model.heads, ck.model.image, s.image, req);
        std::cout << "image " << id << " label " << ck.model.class_names.at(static_cast<std::size_t>(s.diagnosis)) << '\n';
        print_prediction("baseline", base, ck.model);
        print_prediction("intervened", after, ck.model);
      }
      if (curve) {
        const auto samples = ds.split(split_flag(split));
        std::vector<int> labels;
        for (const auto& s : samples) labels.push_back(s.diagnosis);
        const auto thresholds = default_thresholds();
        auto points = threshold_zero_curve(*ck.model.heads, extract_features(ck.model.image, samples), labels, thresholds);
        for (auto& p : points) p.second *= 100.0;
        for (const auto& [t, a] : points) std::cout << "threshold " << num(t) << " accuracy " << num(a) << '\n';
        if (!out.empty()) {
          fs::create_directories(out);
          write_curve_csv(fs::path(out) / "curve.csv", points);
          std::ofstream(fs::path(out) / "curve.svg") << curve_svg(points, "Diagnosis accuracy with scores above threshold zeroed");
          snapshot(ck.config, out);
        }
      }
    } else if (*expl) {
      auto ck = load_checkpoint(ckpt);
      if (!ck.model.heads) throw RequestError("explanations need a bottleneck checkpoint");
      const auto ds = dataset_for(ck, manifest);
      std::vector<const ImageSample*> picked;
      for (const auto& id : images) picked.push_back(&find_sample(ds, id));
      if (picked.empty()) {
        const auto samples = ds.split(split_flag(split));
        for (std::size_t i = 0; i < std::min<std::size_t>(5, samples.size()); ++i) picked.push_back(&samples[i]);
      }
      for (const auto* s : picked) {
        const auto ex = explain(*ck.model.heads, ck.model.image, ck.model.text, ck.model.vocab, ck.model.class_names, *s,
                                ck.config.stage1.align.tau2);
        export_explanation(out, ex, overlay ? &s->image : nullptr);
        std::cout << s->id << ": " << ex.sentence << '\n';
      }
      snapshot(ck.config, out);
    } else if (*cavfit) {
      auto ck = load_checkpoint(ckpt);
      const auto ds = dataset_for(ck, manifest);
      const auto train = ds.split(Split::Train);
      ConceptLabelView view(train);
      std::vector<ConceptDocument> docs;
      for (const auto& s : train) docs.push_back(build_concept_document(s, ck.model.vocab));
      ck.model.bank = refit_bank(ck.model, view, docs, ck.config.stage1, 0);
      save_checkpoint(ck, out);
      snapshot(ck.config, out);
      log_event("cav-fit.done", {{"fitted", std::to_string(ck.model.bank.fitted_count())}, {"ckpt", out}});
    } else if (*cavexp) {
      const auto ck = load_checkpoint(ckpt);
      if (ck.model.bank.empty()) throw RequestError("checkpoint has no concept vectors; run cav-fit first");
      const fs::path target(out);
      if (target.has_parent_path()) fs::create_directories(target.parent_path());
      save_bank(target, ck.model.bank);
      log_event("cav-export.done", {{"out", out}, {"concepts", std::to_string(ck.model.bank.size())}});
    }
    return 0;
  } catch (const CLI::ValidationError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    log_event("error", {{"what", '"' + std::string(e.what()) + '"'}});
    return 1;
  }
}
