// smd: generate phantoms, train, translate, evaluate, and estimate R_I.
//
// Exit codes: 0 success, 2 validation error, 3 numerical abort, 4 I/O error.

#include <CLI11.hpp>
#include <torch/torch.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "smd/checkpoint.hpp"
#include "smd/config.hpp"
#include "smd/datagen_config.hpp"
#include "smd/dataset_io.hpp"
#include "smd/error.hpp"
#include "smd/evaluation.hpp"
#include "smd/mi.hpp"
#include "smd/training.hpp"
#include "smd/translate.hpp"

namespace fs = std::filesystem;
using namespace smd;

namespace {

struct Args {
  std::string config;
  std::string out;
  std::optional<std::int64_t> seed;
  std::string checkpoint;
  std::string dataset;
};

int thread_count() {
  const char* env = std::getenv("SMD_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ValidationError(std::string("SMD_THREADS must be a positive integer, got '") + env + "'");
  return static_cast<int>(n);
}

KeyValueConfig load_config(const Args& a) {
  KeyValueConfig kv;
  if (!a.config.empty()) kv = KeyValueConfig::load(a.config);
  if (a.seed) kv.set("seed", std::to_string(*a.seed));
  return kv;
}

fs::path require_out(const Args& a) {
  if (a.out.empty()) throw ValidationError("--out is required");
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec || !fs::is_directory(a.out)) throw IoError("cannot create output directory: " + a.out);
  return a.out;
}

void write_meta(const fs::path& out, const std::string& command, const KeyValueConfig& effective,
                const Args& a) {
  const std::string text = effective.to_string();
  KeyValueConfig meta;
  meta.set("command", command);
  meta.set("version", SMD_VERSION);
  meta.set("config_hash", hex64(fnv1a64(text.data(), text.size())));
  meta.set("seed", effective.has("seed") ? effective.raw("seed") : "0");
  meta.set("threads", std::to_string(torch::get_num_threads()));
  if (!a.config.empty()) meta.set("config_path", a.config);
  if (!a.dataset.empty()) meta.set("dataset", a.dataset);
  if (!a.checkpoint.empty()) meta.set("checkpoint", a.checkpoint);
  std::string body = meta.to_string();
  body += "# effective configuration\n";
  for (const auto& [k, v] : effective.entries()) body += "config." + k + " = " + v + "\n";
  io::write_text(out / "run.meta", body);
}

datagen::Dataset load_dataset(const Args& a) {
  if (a.dataset.empty()) throw ValidationError("--dataset is required");
  return io::read_dataset(a.dataset);
}

nets::Networks load_networks(const Args& a) {
  if (a.checkpoint.empty()) throw ValidationError("--checkpoint is required");
  return nets::load_checkpoint(a.checkpoint).networks;
}

void check_resolution(const nets::Networks& n, const datagen::Dataset& d) {
  for (const auto& g : d.grids) {
    if (g.height != n.config.height || g.width != n.config.width) {
      throw ValidationError("dataset images are " + std::to_string(g.height) + "x" +
                            std::to_string(g.width) + " but the checkpoint expects " +
                            std::to_string(n.config.height) + "x" + std::to_string(n.config.width));
    }
  }
}

int run_generate(const Args& a) {
  const auto kv = load_config(a);
  const auto opts = datagen::dataset_options_from_kv(kv);
  const auto out = require_out(a);
  const auto gen = datagen::generate_dataset(opts);
  io::write_dataset(gen.dataset, out);
  write_meta(out, "generate", kv, a);
  std::cout << "wrote " << gen.dataset.manifest.records.size() << " records to " << out.string() << "\n";
  return 0;
}

int run_train(const Args& a) {
  const auto kv = load_config(a);
  const auto cfg = training::train_config_from_kv(kv);
  const auto data = load_dataset(a);
  const auto out = require_out(a);
  const auto train_kv = training::to_kv(cfg);

  std::ofstream log(out / "train.log", std::ios::binary);
  if (!log) throw IoError("cannot write " + (out / "train.log").string());
  log << training::log_header();
  training::TrainHooks hooks;
  hooks.on_step = [&](const training::StepReport& r) {
    log << training::log_line(r);
    if ((r.step + 1) % 500 == 0) {
      std::cerr << "step " << r.step + 1 << "/" << cfg.total_steps << " recon_l1=" << r.recon_l1
                << " infomax=" << r.infomax_bound << " disc=" << r.disc_loss << "\n";
    }
  };
  hooks.on_checkpoint = [&](std::int64_t step, const nets::Networks& n) {
    char name[64];
    std::snprintf(name, sizeof name, "checkpoint_step%07lld.smdckpt", static_cast<long long>(step));
    nets::save_checkpoint(out / name, n, train_kv);
  };
  const auto result = training::train(cfg, data, hooks);
  log.close();
  nets::save_checkpoint(out / "checkpoint.smdckpt", result.networks, train_kv);
  write_meta(out, "train", kv, a);
  std::cout << "checkpoint " << (out / "checkpoint.smdckpt").string() << " checksum "
            << hex64(nets::checksum(result.networks)) << "\n";
  return 0;
}

int run_translate(const Args& a) {
  const auto kv = load_config(a);
  kv.reject_unknown({"target_reference", "target_site", "target_c", "source_site", "hard_anatomy",
                     "export_pgm", "seed"});
  const auto nets = load_networks(a);
  const auto data = load_dataset(a);
  check_resolution(nets, data);
  const auto out = require_out(a);
  const auto& recs = data.manifest.records;

  const int targets_given = kv.has("target_reference") + kv.has("target_site") + kv.has("target_c");
  if (targets_given != 1) {
    throw ValidationError("exactly one of target_reference, target_site, target_c must be set");
  }
  translate::TranslationJob job;
  job.hard_anatomy = kv.get_bool("hard_anatomy", true);
  std::optional<int> target_site;
  if (kv.has("target_reference")) {
    job.target = io::read_image(kv.raw("target_reference"));
  } else if (kv.has("target_c")) {
    const auto c = kv.get_doubles("target_c");
    if (c.size() != 2) throw ValidationError("target_c must have exactly 2 values");
    job.target = translate::ContrastCode{static_cast<float>(c[0]), static_cast<float>(c[1])};
  } else {
    target_site = static_cast<int>(kv.get_int("target_site", 0));
    std::vector<ImageGrid> refs;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      if (recs[i].site_id == *target_site) refs.push_back(data.grids[i]);
    }
    if (refs.empty()) throw ValidationError("target_site has no images in the dataset");
    job.target = translate::mean_contrast_code(nets, refs);
  }

  std::vector<std::size_t> chosen;
  const bool filter = kv.has("source_site");
  const auto source_site = kv.get_int("source_site", -1);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (filter && recs[i].site_id != source_site) continue;
    if (target_site && recs[i].site_id == *target_site) continue;
    chosen.push_back(i);
    job.source_images.push_back(data.grids[i]);
  }
  if (chosen.empty()) throw ValidationError("no source images selected");
  const auto outputs = translate::harmonize(nets, job);

  const bool pgm = kv.get_bool("export_pgm", false);
  fs::create_directories(out / "grids");
  if (pgm) fs::create_directories(out / "pgm");
  for (std::size_t k = 0; k < chosen.size(); ++k) {
    const auto& id = recs[chosen[k]].sample_id;
    io::write_image(out / "grids" / (id + ".smdg"), outputs[k]);
    if (pgm) io::write_pgm(out / "pgm" / (id + ".pgm"), outputs[k]);
  }

  // Quality against the ground-truth render of the same subject and view at
  // the target site, where the dataset holds one.
  std::vector<ImageGrid> produced, truth;
  std::vector<std::string> ids;
  if (target_site) {
    for (std::size_t k = 0; k < chosen.size(); ++k) {
      const auto& src = recs[chosen[k]];
      for (std::size_t j = 0; j < recs.size(); ++j) {
        if (recs[j].subject_id == src.subject_id && recs[j].view_index == src.view_index &&
            recs[j].site_id == *target_site) {
          produced.push_back(outputs[k]);
          truth.push_back(data.grids[j]);
          ids.push_back(src.sample_id);
          break;
        }
      }
    }
  }
  std::string report;
  if (produced.empty()) {
    report = "# no ground-truth target renders in the dataset; quality not computed\nid\tssim\tpsnr_db\n";
  } else {
    report = translate::format_quality_tsv(translate::quality_report(produced, truth, ids));
  }
  io::write_text(out / "quality.tsv", report);
  write_meta(out, "translate", kv, a);
  std::cout << "translated " << outputs.size() << " images; " << produced.size()
            << " with ground truth\n";
  return 0;
}

int run_evaluate(const Args& a) {
  const auto kv = load_config(a);
  kv.reject_unknown({"seed", "reference_mode", "mine_steps", "holdout_fraction"});
  const auto nets = load_networks(a);
  const auto data = load_dataset(a);
  check_resolution(nets, data);
  const auto out = require_out(a);
  auto opts = evaluation::default_evaluation_options(static_cast<std::uint64_t>(kv.get_int("seed", 0)));
  opts.reference = evaluation::reference_mode_from_string(kv.get_string("reference_mode", "single_image"));
  opts.ratio.mine.train_steps = static_cast<int>(kv.get_int("mine_steps", opts.ratio.mine.train_steps));
  opts.ratio.holdout_fraction = kv.get_double("holdout_fraction", opts.ratio.holdout_fraction);
  const auto report = evaluation::evaluate_report(nets, data, opts);
  io::write_text(out / "evaluation.txt", report);
  write_meta(out, "evaluate", kv, a);
  std::cout << report;
  return 0;
}

int run_mi_ratio(const Args& a) {
  const auto kv = load_config(a);
  kv.reject_unknown({"seed", "mine_steps", "mine_batch", "mine_learning_rate", "holdout_fraction",
                     "standardize_c", "entropy_mode", "product_shuffles"});
  const auto nets = load_networks(a);
  const auto data = load_dataset(a);
  check_resolution(nets, data);
  const auto out = require_out(a);

  auto opts = evaluation::default_evaluation_options(static_cast<std::uint64_t>(kv.get_int("seed", 0))).ratio;
  opts.mine.train_steps = static_cast<int>(kv.get_int("mine_steps", opts.mine.train_steps));
  opts.mine.batch_size = kv.get_int("mine_batch", opts.mine.batch_size);
  opts.mine.learning_rate = kv.get_double("mine_learning_rate", opts.mine.learning_rate);
  opts.holdout_fraction = kv.get_double("holdout_fraction", opts.holdout_fraction);
  opts.standardize_c = kv.get_bool("standardize_c", opts.standardize_c);
  opts.product_shuffles = static_cast<int>(kv.get_int("product_shuffles", opts.product_shuffles));
  const auto mode = kv.get_string("entropy_mode", "automatic");
  if (mode == "automatic") {
    opts.entropy_mode = mi::EntropyMode::automatic;
  } else if (mode == "differential") {
    opts.entropy_mode = mi::EntropyMode::differential;
  } else if (mode == "discrete") {
    opts.entropy_mode = mi::EntropyMode::discrete;
  } else {
    throw ValidationError("entropy_mode must be automatic, differential or discrete, got '" + mode + "'");
  }

  const auto codes = evaluation::encode_all(nets, data.grids);
  const auto r = mi::ratio_RI(codes.anatomy_summary, codes.contrast, opts);
  const auto text = mi::format_report_table(r) + "\n" + mi::format_report_kv(r);
  io::write_text(out / "ri_report.txt", text);
  write_meta(out, "mi-ratio", kv, a);
  std::cout << text;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-modality anatomy/contrast disentanglement on synthetic phantoms"};
  app.require_subcommand(1);
  app.set_version_flag("--version", SMD_VERSION);

  Args args;
  const auto add_common = [&](CLI::App* sub, bool checkpoint, bool dataset) {
    sub->add_option("--config", args.config, "key = value configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", args.out, "output directory")->required();
    sub->add_option("--seed", args.seed, "overrides the config seed");
    if (checkpoint) sub->add_option("--checkpoint", args.checkpoint, "checkpoint file")->required();
    if (dataset) sub->add_option("--dataset", args.dataset, "dataset directory")->required();
  };
  auto* gen = app.add_subcommand("generate", "render a phantom dataset");
  add_common(gen, false, false);
  auto* train = app.add_subcommand("train", "train the networks on a dataset");
  add_common(train, false, true);
  auto* trans = app.add_subcommand("translate", "harmonize images to a target contrast");
  add_common(trans, true, true);
  auto* eval = app.add_subcommand("evaluate", "reconstruction, translation and R_I report");
  add_common(eval, true, true);
  auto* ratio = app.add_subcommand("mi-ratio", "R_I(a; c) with estimator diagnostics");
  add_common(ratio, true, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const int threads = thread_count();
    torch::set_num_threads(threads);
    if (gen->parsed()) return run_generate(args);
    if (train->parsed()) return run_train(args);
    if (trans->parsed()) return run_translate(args);
    if (eval->parsed()) return run_evaluate(args);
    return run_mi_ratio(args);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
