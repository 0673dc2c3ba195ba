#include "dseq/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "dseq/eval.hpp"
#include "dseq/gradsuite.hpp"
#include "dseq/trainer.hpp"

DSEQ_BEGIN_NAMESPACE

namespace {

namespace fs = std::filesystem;

std::string fnv_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

// DSEQ_THREADS: 0 means auto. Kernels here run on the calling thread, so the
// value is validated and reported but cannot raise parallelism.
std::size_t thread_setting() {
  const char* env = std::getenv("DSEQ_THREADS");
  if (!env || !*env) return 0;
  char* end = nullptr;
  const long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 0) throw ConfigError(std::string("DSEQ_THREADS must be a non-negative integer, got '") + env + "'");
  return static_cast<std::size_t>(v);
}

struct ConfigFlags {
  std::string config;
  std::vector<std::string> sets;
  std::string dataset, out;
  std::int64_t seed = -1, epochs = -1;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config, "flat key=value config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "override one config entry, KEY=VALUE (repeatable)");
    cmd->add_option("--dataset", dataset, "dataset directory (overrides the config)");
    cmd->add_option("--out", out, "output directory (overrides the config)");
    cmd->add_option("--seed", seed, "seed override")->check(CLI::NonNegativeNumber);
    cmd->add_option("--epochs", epochs, "epoch override")->check(CLI::PositiveNumber);
  }

  TrainConfig resolve() const {
    TrainConfig cfg = config.empty() ? TrainConfig{} : load_config(config);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects KEY=VALUE, got '" + s + "'");
      apply_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (!dataset.empty()) cfg.dataset = dataset;
    if (!out.empty()) cfg.out = out;
    if (seed >= 0) cfg.seed = static_cast<std::uint64_t>(seed);
    if (epochs > 0) cfg.epochs = static_cast<std::size_t>(epochs);
    cfg.validate();
    return cfg;
  }
};

// A model source: a checkpoint, or a freshly initialised model from a config.
struct ModelFlags {
  std::string checkpoint;
  ConfigFlags config;

  void attach(CLI::App* cmd) {
    cmd->add_option("--checkpoint", checkpoint, "trained checkpoint")->check(CLI::ExistingFile);
    config.attach(cmd);
  }

  TrainState load() const {
    if (!checkpoint.empty()) return load_checkpoint(checkpoint);
    return TrainState::fresh(config.resolve());
  }
};

void print_hash(std::ostream& out, const std::string& hash) { out << "config hash: " << hash << "\n"; }

std::vector<SyntheticSample> load_samples(const std::string& dir, std::size_t limit = 0) {
  Dataset ds = read_dataset(dir);
  if (limit && ds.samples.size() > limit) ds.samples.resize(limit);
  return std::move(ds.samples);
}

void check_image_size(const std::vector<SyntheticSample>& samples, const ViTConfig& vit, const std::string& dir) {
  if (!samples.empty() && samples.front().size() != vit.image_size) {
    throw ConfigError("dataset " + dir + " has " + std::to_string(samples.front().size()) +
                      "-pixel images, the model expects " + std::to_string(vit.image_size));
  }
}

std::vector<OrderScheme> parse_schemes(const std::string& text) {
  std::vector<OrderScheme> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(parse_order_scheme(item));
  }
  if (out.empty()) throw ConfigError("--schemes is empty");
  return out;
}

std::vector<int> all_positions(const ViTConfig& vit) {
  std::vector<int> p{kClsPosition};
  for (std::size_t i = 0; i < vit.patch_count(); ++i) p.push_back(static_cast<int>(i));
  return p;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"dseq: discriminative sequential joint-embedding pre-training at desk scale", "dseq"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  // datagen
  auto* datagen = app.add_subcommand("datagen", "write a synthetic salient-object dataset");
  std::size_t dg_n = 512, dg_size = 32;
  std::uint64_t dg_seed = 7;
  std::string dg_out;
  bool dg_jitter = false;
  datagen->add_option("--n", dg_n, "number of images")->capture_default_str();
  datagen->add_option("--size", dg_size, "pixels per side")->capture_default_str()->check(CLI::PositiveNumber);
  datagen->add_option("--seed", dg_seed, "dataset seed")->capture_default_str();
  datagen->add_option("--out", dg_out, "output directory")->required();
  datagen->add_flag("--crop-jitter", dg_jitter, "random resized crop of each scene");

  // pretrain
  auto* pretrain = app.add_subcommand("pretrain", "pre-train context encoder and predictor");
  ConfigFlags pt_cfg;
  pt_cfg.attach(pretrain);
  std::string pt_resume;
  pretrain->add_option("--resume", pt_resume, "checkpoint to resume from")->check(CLI::ExistingFile);

  // regions
  auto* regions = app.add_subcommand("regions", "show saliency maps and selected regions");
  ModelFlags rg_model;
  rg_model.attach(regions);
  std::size_t rg_index = 0, rg_count = 1;
  double rg_epoch = -1;
  std::string rg_csv, rg_saliency_pgm, rg_pgm;
  regions->add_option("--index", rg_index, "first image")->capture_default_str();
  regions->add_option("--count", rg_count, "number of images")->capture_default_str();
  regions->add_option("--epoch", rg_epoch, "curriculum epoch (default: the last, fully discriminative)");
  regions->add_option("--csv", rg_csv, "write image,cell,region,origin rows");
  regions->add_option("--dump-saliency", rg_saliency_pgm, "PGM of the first image next to its saliency map");
  regions->add_option("--pgm-out", rg_pgm, "PGM of the first image next to its region labels");

  // probe
  auto* probe = app.add_subcommand("probe", "linear probe on frozen target-encoder features");
  ModelFlags pr_model;
  pr_model.attach(probe);
  std::string pr_train, pr_test, pr_json;
  ProbeConfig pr_cfg;
  probe->add_option("--train", pr_train, "training split")->required();
  probe->add_option("--test", pr_test, "held-out split")->required();
  probe->add_option("--probe-epochs", pr_cfg.epochs, "probe epochs")->capture_default_str();
  probe->add_option("--probe-seed", pr_cfg.seed, "probe shuffling seed")->capture_default_str();
  probe->add_option("--json", pr_json, "write the result as JSON");

  // cluster
  auto* cluster = app.add_subcommand("cluster", "k-means over final-block patch embeddings");
  ModelFlags cl_model;
  cl_model.attach(cluster);
  std::size_t cl_index = 0, cl_k = 4;
  std::uint64_t cl_seed = 0;
  std::string cl_pgm, cl_csv;
  cluster->add_option("--index", cl_index, "image index")->capture_default_str();
  cluster->add_option("--k", cl_k, "clusters")->capture_default_str();
  cluster->add_option("--kmeans-seed", cl_seed, "k-means++ seed")->capture_default_str();
  cluster->add_option("--pgm-out", cl_pgm, "PGM of the image next to its cluster map");
  cluster->add_option("--csv", cl_csv, "write cell,cluster rows");

  // steps
  auto* steps = app.add_subcommand("steps", "mean prediction loss per sequential step");
  ModelFlags st_model;
  st_model.attach(steps);
  std::size_t st_limit = 0;
  std::uint64_t st_seed = 0;
  std::string st_csv;
  steps->add_option("--limit", st_limit, "use at most this many images (0 = all)")->capture_default_str();
  steps->add_option("--selection-seed", st_seed, "seed for random fill-in regions")->capture_default_str();
  steps->add_option("--csv", st_csv, "write the per-step table");

  // ablate-order
  auto* ablate = app.add_subcommand("ablate-order", "train and probe one model per prediction order");
  ConfigFlags ab_cfg;
  ab_cfg.attach(ablate);
  std::string ab_schemes = "flat,random,spatial,sequential", ab_train, ab_test, ab_csv;
  ProbeConfig ab_probe;
  ablate->add_option("--schemes", ab_schemes, "comma-separated order schemes")->capture_default_str();
  ablate->add_option("--probe-train", ab_train, "probe training split")->required();
  ablate->add_option("--probe-test", ab_test, "probe held-out split")->required();
  ablate->add_option("--probe-epochs", ab_probe.epochs, "probe epochs")->capture_default_str();
  ablate->add_option("--csv", ab_csv, "comparison table (default <out>/ablation.csv)");

  // gradcheck
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suite in 64-bit precision");
  int gc_instances = 20;
  std::uint64_t gc_seed = 2024;
  double gc_tol = 1e-4;
  std::size_t gc_sample = 200;
  gradcheck->add_option("--instances", gc_instances, "random instances per check")->capture_default_str();
  gradcheck->add_option("--seed", gc_seed, "seed")->capture_default_str();
  gradcheck->add_option("--tol", gc_tol, "relative error tolerance")->capture_default_str();
  gradcheck->add_option("--sample", gc_sample, "parameter elements checked per loss instance")->capture_default_str();

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    err << "run 'dseq --help' for usage\n";
    return kExitUsage;
  }

  try {
    const std::size_t threads = thread_setting();
    if (threads > 1) err << "note: DSEQ_THREADS=" << threads << " requested; kernels run on one thread\n";

    if (*datagen) {
      std::ostringstream key;
      key << "n=" << dg_n << "\nsize=" << dg_size << "\nseed=" << dg_seed << "\ncrop_jitter=" << dg_jitter << "\n";
      print_hash(out, fnv_hex(key.str()));
      Dataset ds{dg_size, dg_seed, {}};
      GenerateOptions opts;
      opts.crop_jitter = dg_jitter;
      for (std::size_t i = 0; i < dg_n; ++i) {
        ds.samples.push_back(generate(sample_seed(dg_seed, i), i % kNumClasses, dg_size, opts));
      }
      write_dataset(ds, dg_out);
      out << "wrote " << dg_n << " images of " << dg_size << "x" << dg_size << " to " << dg_out << "\n";
      return kExitOk;
    }

    if (*pretrain) {
      const TrainConfig cfg = pt_cfg.resolve();
      print_hash(out, config_hash(cfg));
      fs::create_directories(cfg.out);
      {
        std::ofstream f(fs::path(cfg.out) / "config.txt");
        f << config_text(cfg);
      }
      TrainOptions opts;
      if (!pt_resume.empty()) opts.resume = pt_resume;
      opts.on_epoch = [&](const EpochSummary& s) {
        out << "epoch " << s.epoch + 1 << "/" << cfg.epochs << "  loss " << std::setprecision(6) << s.mean_loss
            << "  lambda " << std::setprecision(3) << s.lambda << "  " << std::setprecision(3) << s.seconds << "s\n"
            << std::flush;
      };
      const TrainResult r = train(cfg, opts);
      out << "final checkpoint: " << r.final_checkpoint.string() << "\n";
      out << "loss log: " << (fs::path(cfg.out) / "loss_log.csv").string() << "\n";
      return kExitOk;
    }

    if (*regions) {
      const TrainState state = rg_model.load();
      const TrainConfig& cfg = state.cfg;
      print_hash(out, config_hash(cfg));
      const auto samples = load_samples(rg_model.config.dataset.empty() ? cfg.dataset : rg_model.config.dataset);
      check_image_size(samples, cfg.vit, cfg.dataset);
      if (rg_index + rg_count > samples.size() || rg_count == 0) {
        throw ConfigError("--index/--count select images outside the " + std::to_string(samples.size()) +
                          "-image dataset");
      }
      const double total = static_cast<double>(cfg.epochs > 1 ? cfg.epochs - 1 : 1);
      const double epoch = rg_epoch < 0 ? total : rg_epoch;
      std::ofstream csv;
      if (!rg_csv.empty()) {
        csv.open(rg_csv);
        if (!csv) throw Error("cannot write " + rg_csv);
        csv << "image,cell,region,origin\n";
      }
      const auto positions = all_positions(cfg.vit);
      for (std::size_t i = rg_index; i < rg_index + rg_count; ++i) {
        std::vector<Tensor> blocks;
        target_embeddings(samples[i].image, state.model.target, cfg.vit, &blocks);
        const SaliencyMap map =
            saliency_from_tokens(blocks[cfg.layer() - 1], positions, cfg.vit.grid(), cfg.similarity);
        Rng rng = Rng(cfg.seed).split(3).split(i);
        const RegionSet set = curriculum_select(map, epoch, total, cfg.selection(), rng);
        out << "image " << i << " (" << class_name(samples[i].label) << ")";
        if (set.tau) out << "  tau " << std::setprecision(4) << *set.tau;
        out << "\n";
        std::vector<std::size_t> labels(cfg.vit.patch_count());
        for (std::size_t k = 0; k < set.size(); ++k) {
          out << "  R" << k + 1 << "  " << to_string(set.origins[k]) << "  cells " << set.regions[k].size();
          if (k < set.scores.size()) out << "  score " << std::setprecision(4) << set.scores[k];
          out << "\n";
          for (int c : set.regions[k]) {
            labels[static_cast<std::size_t>(c)] = k;
            if (csv.is_open()) csv << i << ',' << c << ',' << k + 1 << ',' << to_string(set.origins[k]) << "\n";
          }
        }
        if (i == rg_index) {
          const GreyImage img = image_to_grey(samples[i].image);
          if (!rg_saliency_pgm.empty()) {
            write_pgm(rg_saliency_pgm, side_by_side(img, saliency_to_grey(map, cfg.vit.patch_size)));
          }
          if (!rg_pgm.empty()) {
            write_pgm(rg_pgm, side_by_side(img, labels_to_grey(labels, cfg.vit.grid(), cfg.vit.grid(), set.size(),
                                                               cfg.vit.patch_size)));
          }
        }
      }
      return kExitOk;
    }

    if (*probe) {
      const TrainState state = pr_model.load();
      print_hash(out, config_hash(state.cfg));
      const auto train_set = load_samples(pr_train), test_set = load_samples(pr_test);
      check_image_size(train_set, state.cfg.vit, pr_train);
      check_image_size(test_set, state.cfg.vit, pr_test);
      const ProbeResult r = linear_probe(state.model, state.cfg.vit, train_set, test_set, pr_cfg);
      out << "probe accuracy " << std::setprecision(4) << r.accuracy << " (train " << r.train_accuracy << ", "
          << r.epochs << " epochs, probe hash " << r.config_hash << ")\n";
      for (std::size_t c = 0; c < r.per_class_accuracy.size(); ++c) {
        out << "  " << class_name(c) << "  " << r.per_class_accuracy[c] << "\n";
      }
      if (!pr_json.empty()) {
        nlohmann::json j;
        j["accuracy"] = r.accuracy;
        j["train_accuracy"] = r.train_accuracy;
        j["per_class_accuracy"] = nlohmann::json::array();
        for (double a : r.per_class_accuracy) {
          j["per_class_accuracy"].push_back(std::isnan(a) ? nlohmann::json() : nlohmann::json(a));
        }
        j["epochs"] = r.epochs;
        j["probe_hash"] = r.config_hash;
        j["config_hash"] = config_hash(state.cfg);
        std::ofstream f(pr_json);
        if (!f) throw Error("cannot write " + pr_json);
        f << j.dump(2) << "\n";
      }
      return kExitOk;
    }

    if (*cluster) {
      const TrainState state = cl_model.load();
      const TrainConfig& cfg = state.cfg;
      print_hash(out, config_hash(cfg));
      const auto samples = load_samples(cl_model.config.dataset.empty() ? cfg.dataset : cl_model.config.dataset);
      check_image_size(samples, cfg.vit, cfg.dataset);
      if (cl_index >= samples.size()) throw ConfigError("--index is outside the dataset");
      const PatchClusters pc = patch_clusters(state.model.target, cfg.vit, samples[cl_index].image, cl_k, cl_seed);
      out << "inertia " << std::setprecision(6) << pc.inertia << " after " << pc.inertia_history.size()
          << " assignment passes\n";
      for (std::size_t r = 0; r < pc.rows; ++r) {
        out << "  ";
        for (std::size_t c = 0; c < pc.cols; ++c) out << pc.ids[r * pc.cols + c] << (c + 1 < pc.cols ? " " : "\n");
      }
      if (!cl_pgm.empty()) {
        write_pgm(cl_pgm, side_by_side(image_to_grey(samples[cl_index].image),
                                       labels_to_grey(pc.ids, pc.rows, pc.cols, cl_k, cfg.vit.patch_size)));
      }
      if (!cl_csv.empty()) {
        std::ofstream f(cl_csv);
        if (!f) throw Error("cannot write " + cl_csv);
        f << "cell,cluster\n";
        for (std::size_t i = 0; i < pc.ids.size(); ++i) f << i << ',' << pc.ids[i] << "\n";
      }
      return kExitOk;
    }

    if (*steps) {
      const TrainState state = st_model.load();
      const TrainConfig& cfg = state.cfg;
      print_hash(out, config_hash(cfg));
      if (cfg.order != OrderScheme::Sequential) {
        err << "note: checkpoint was trained with the " << to_string(cfg.order) << " order\n";
      }
      const auto samples =
          load_samples(st_model.config.dataset.empty() ? cfg.dataset : st_model.config.dataset, st_limit);
      check_image_size(samples, cfg.vit, cfg.dataset);
      const auto rows = per_step_losses(state, samples, st_seed);
      for (const auto& r : rows) {
        out << "Top-" << r.step + 1 << "  " << std::setprecision(6) << r.mean_loss << "  (" << r.count << " images)\n";
      }
      if (rows.size() >= 4) {
        const double early = (rows[0].mean_loss + rows[1].mean_loss) / 2;
        const double late = (rows[rows.size() - 2].mean_loss + rows.back().mean_loss) / 2;
        out << "early steps mean " << early << ", late steps mean " << late << ": "
            << (late > early ? "later steps are harder" : "later steps are not harder") << "\n";
      }
      if (!st_csv.empty()) write_step_losses_csv(st_csv, rows);
      return kExitOk;
    }

    if (*ablate) {
      const TrainConfig cfg = ab_cfg.resolve();
      print_hash(out, config_hash(cfg));
      const auto pre = load_samples(cfg.dataset), ptr = load_samples(ab_train), pte = load_samples(ab_test);
      check_image_size(pre, cfg.vit, cfg.dataset);
      AblationOptions opts;
      opts.schemes = parse_schemes(ab_schemes);
      opts.probe = ab_probe;
      opts.progress = [&](const std::string& m) { out << m << "\n" << std::flush; };
      const auto rows = order_ablation(cfg, pre, ptr, pte, opts);
      out << "scheme      probe accuracy  final loss\n";
      for (const auto& r : rows) {
        out << std::left << std::setw(12) << to_string(r.scheme) << std::setw(16) << std::setprecision(4) << r.accuracy
            << std::setprecision(6) << r.final_loss << "\n";
      }
      const fs::path csv = ab_csv.empty() ? fs::path(cfg.out) / "ablation.csv" : fs::path(ab_csv);
      write_ablation_csv(csv, rows);
      out << "table: " << csv.string() << "\n";
      return kExitOk;
    }

    if (*gradcheck) {
      std::ostringstream key;
      key << "instances=" << gc_instances << "\nseed=" << gc_seed << "\ntol=" << gc_tol << "\nsample=" << gc_sample
          << "\n";
      print_hash(out, fnv_hex(key.str()));
      bool ok = true;
      auto report = [&](const gradsuite::Row& r) {
        const bool pass = r.passed == r.instances;
        ok = ok && pass;
        out << (pass ? "ok    " : "FAIL  ") << std::left << std::setw(22) << r.op << std::right << r.passed << "/"
            << r.instances << "  max rel error " << std::scientific << std::setprecision(2) << r.max_rel_error
            << std::defaultfloat << "\n";
      };
      for (const auto& r : gradsuite::run_primitives(gc_instances, gc_seed, gc_tol)) report(r);
      report(gradsuite::run_dseq_loss(gc_instances, gc_seed, gc_tol, gc_sample));
      return ok ? kExitOk : kExitDomainError;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomainError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitDomainError;
  }
  return kExitUsage;
}

int run_cli(int argc, const char* const* argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

DSEQ_END_NAMESPACE
