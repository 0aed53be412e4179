// latent-inpaint: train a WGAN-GP image prior, inpaint with it, evaluate.
//
//   latent-inpaint train    --data DIR --out DIR [--config FILE] [--resume CKPT] [--seed N]
//   latent-inpaint inpaint  --ckpt FILE --image FILE --mask SPEC --out DIR [--blend overlay|poisson]
//   latent-inpaint eval     --results DIR --truth DIR --out CSV
//   latent-inpaint generate --ckpt FILE --out DIR [--count N] [--seed N]
//   latent-inpaint mask     --kind central|three_squares --out FILE [--size N]
//
// Exit codes: 0 ok, 2 bad arguments, 3 data error, 4 numerical abort,
// 5 isolated hole in the mask.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "latent_inpaint.hpp"

namespace fs = std::filesystem;
using namespace latent_inpaint;

namespace {

enum ExitCode : int { kOk = 0, kBadArgs = 2, kDataError = 3, kNumerical = 4, kIsolatedHole = 5 };

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

RunConfig resolve_config(const std::string& config_path) {
  RunConfig cfg;
  if (!config_path.empty()) cfg.merge(read_json_file(config_path));
  return cfg;
}

void write_resolved_config(const RunConfig& cfg, const fs::path& dir) {
  std::ofstream out(dir / "config.json");
  out << cfg.to_json().dump(2) << '\n';
  if (!out) throw DataError("cannot write " + (dir / "config.json").string());
}

fs::path checkpoint_path(const fs::path& dir, std::uint64_t iteration) {
  char name[64];
  std::snprintf(name, sizeof name, "ckpt_%08llu.liwg", static_cast<unsigned long long>(iteration));
  return dir / name;
}

std::string csv_row(const IterationLog& log) {
  return std::to_string(log.iteration) + ',' + format_metric(log.critic_loss) + ',' +
         format_metric(log.wasserstein_estimate) + ',' + format_metric(log.gp_term) + ',' +
         format_metric(log.gen_loss);
}

constexpr const char* kLossHeader = "iteration,critic_loss,wasserstein_estimate,gp_term,gen_loss";

// Keeps rows up to and including `last` so a resumed run continues the log.
std::vector<std::string> existing_loss_rows(const fs::path& path, std::uint64_t last) {
  std::vector<std::string> rows;
  std::ifstream in(path);
  std::string line;
  if (!std::getline(in, line)) return rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (std::stoull(line.substr(0, comma)) <= last) rows.push_back(line);
  }
  return rows;
}

int cmd_train(const std::string& data_dir, const std::string& config_path, const std::string& out_dir,
              const std::string& resume, std::optional<std::uint64_t> seed,
              std::optional<std::uint64_t> iterations) {
  RunConfig cfg;
  std::optional<Checkpoint> ck;
  if (!resume.empty()) {
    ck = load_checkpoint(resume);
    cfg.network = ck->network;
    cfg.train = ck->train;
  }
  if (!config_path.empty()) cfg.merge(read_json_file(config_path));
  if (seed) cfg.train.seed = *seed;
  if (iterations) cfg.train.iterations = *iterations;
  cfg.network.latent_dim = cfg.train.latent_dim;
  cfg.network.validate();
  cfg.train.validate();
  if (ck) {
    if (!(ck->network == cfg.network)) throw UsageError("--resume: network config differs from the checkpoint");
    if (ck->rng_seed != cfg.train.seed) throw UsageError("--resume: seed differs from the checkpoint");
    if (ck->iteration > cfg.train.iterations) {
      throw UsageError("--resume: checkpoint is past the requested iteration count");
    }
  }

  const fs::path out(out_dir);
  fs::create_directories(out / "checkpoints");
  auto data = load_dataset(data_dir, cfg.network.image_size, cfg.train.hflip_augment, cfg.network.image_channels);
  data.write_manifest(out / "manifest.txt");
  write_resolved_config(cfg, out);

  TrainState state = ck ? restore(*ck) : make_train_state(cfg.network, cfg.train.seed);
  const auto csv_path = out / "losses.csv";
  const auto kept = ck ? existing_loss_rows(csv_path, ck->iteration) : std::vector<std::string>{};
  std::ofstream csv(csv_path, std::ios::trunc);
  csv << kLossHeader << '\n';
  for (const auto& row : kept) csv << row << '\n';

  TrainHooks hooks;
  hooks.on_iteration = [&](const IterationLog& log) {
    csv << csv_row(log) << '\n';
    if (log.iteration % 100 == 0 || log.iteration == cfg.train.iterations) {
      csv.flush();
      std::cerr << "iteration " << log.iteration << "  critic " << log.critic_loss << "  W "
                << log.wasserstein_estimate << "  gen " << log.gen_loss << '\n';
    }
  };
  hooks.on_checkpoint = [&](const TrainState& s) {
    const auto snap = snapshot(s, cfg.train);
    save_checkpoint(snap, checkpoint_path(out / "checkpoints", s.iteration));
    save_checkpoint(snap, out / "checkpoints" / "latest.liwg");
  };
  try {
    train(cfg.train, data, state, hooks);
  } catch (const TrainingAborted& e) {
    csv.flush();
    std::cerr << "error: " << e.what() << " (last checkpoint kept)\n";
    return kNumerical;
  }
  std::cerr << "finished " << state.iteration << " iterations; checkpoints in " << (out / "checkpoints") << '\n';
  return kOk;
}

struct MaskSpec {
  MaskKind kind;
  fs::path path;
};

MaskSpec parse_mask_spec(const std::string& spec) {
  if (spec == "central" || spec == "three_squares") return {parse_mask_kind(spec), {}};
  const fs::path p(spec);
  if (p.extension() == ".png" || p.extension() == ".PNG") return {MaskKind::file, p};
  throw UsageError("--mask must be central, three_squares or a PNG file");
}

void write_weight_map(const WeightMap& w, const fs::path& path) {
  Raster8 r{1, w.height, w.width, std::vector<std::uint8_t>(w.values.size())};
  for (std::size_t k = 0; k < w.values.size(); ++k) {
    r.bytes[k] = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(w.values[k], 0.0, 1.0)));
  }
  write_png(path, r);
}

int cmd_inpaint(const std::string& ckpt_path, const std::string& image_path, const std::string& mask_spec,
                const std::string& out_dir, const std::string& config_path, const std::string& blend_name,
                std::optional<std::size_t> restarts, std::optional<std::uint64_t> seed,
                std::optional<std::size_t> iterations) {
  RunConfig cfg = resolve_config(config_path);
  if (restarts) cfg.inpaint.restarts = *restarts;
  if (seed) cfg.inpaint.seed = *seed;
  if (iterations) cfg.inpaint.iterations = *iterations;
  cfg.inpaint.validate();
  const auto blend = parse_blend(blend_name);
  const auto spec = parse_mask_spec(mask_spec);

  const auto ck = load_checkpoint(ckpt_path);
  cfg.network = ck.network;
  cfg.train = ck.train;
  const auto size = ck.network.image_size;
  const auto y = preprocess(decode_image(image_path, ck.network.image_channels), size);
  MaskParams params;
  params.path = spec.path;
  const auto mask = make_mask(spec.kind, size, params);
  if (mask.height != size || mask.width != size) throw DataError("mask size does not match the image");
  if (blend == Blend::poisson) detail::require_anchored_holes(mask);

  const fs::path out(out_dir);
  fs::create_directories(out);
  write_resolved_config(cfg, out);

  auto state = restore(ck);
  const Generator& generator = state.generator;
  const Critic& critic = state.critic;
  const InpaintProblem problem(y, mask, cfg.inpaint.window);
  auto enc = find_closest_encoding(problem, generator, critic, ck.network.latent_dim, cfg.inpaint,
                                   cfg.inpaint.seed);
  Image generated;
  {
    NoGradGuard no_grad;
    generated = tensor_to_image(generator(enc.z));
  }
  const auto result = composite(y, mask, generated, blend);

  encode_image(generated, out / "generated.png");
  encode_image(result, out / "result.png");
  write_weight_map(problem.weight_map(), out / "weight_map.png");
  std::ofstream trace(out / "loss_trace.csv");
  trace << "restart,iteration,loss,best_loss\n";
  for (const auto& t : enc.trace) {
    trace << t.restart << ',' << t.iteration << ',' << format_metric(t.loss) << ',' << format_metric(t.best_loss)
          << '\n';
  }
  std::cerr << "best loss " << enc.best_loss << " (restart " << enc.best_restart << "); wrote " << out << '\n';
  return kOk;
}

int cmd_eval(const std::string& results, const std::string& truth, const std::string& out_csv) {
  const auto report = evaluate_pair_set(results, truth);
  write_metrics_csv(report, out_csv);
  std::cout << "images " << report.rows.size() << "  mse " << report.mean.mse << "  psnr "
            << format_metric(report.mean.psnr) << "  ssim " << report.mean.ssim << '\n';
  return kOk;
}

int cmd_generate(const std::string& ckpt_path, const std::string& out_dir, std::size_t count,
                 std::uint64_t seed) {
  if (count == 0) throw UsageError("--count must be positive");
  const auto ck = load_checkpoint(ckpt_path);
  const auto state = restore(ck);
  const fs::path out(out_dir);
  fs::create_directories(out);
  auto rng = derive_rng({seed, 0x67656e});
  const auto latent = ck.network.latent_dim;
  Tensor z({count, latent}, normal_samples(rng, count * latent));
  NoGradGuard no_grad;
  const auto images = state.generator(z);
  for (std::size_t k = 0; k < count; ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%04zu.png", k);
    encode_image(tensor_to_image(images, k), out / name);
  }
  return kOk;
}

int cmd_mask(const std::string& kind, std::size_t size, const std::string& out_path) {
  const auto k = parse_mask_kind(kind);
  if (k == MaskKind::file) throw UsageError("--kind must be central or three_squares");
  save_mask(make_mask(k, size), out_path);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic image inpainting with a WGAN-GP image prior"};
  app.require_subcommand(1);

  std::string data, config, out, resume, ckpt, image, mask, blend = "poisson", results, truth, kind;
  std::optional<std::uint64_t> seed, train_iterations;
  std::optional<std::size_t> restarts, inpaint_iterations;
  std::size_t count = 16, size = 64;
  std::uint64_t gen_seed = 0;

  auto* train_cmd = app.add_subcommand("train", "Train generator and critic on a PNG directory");
  train_cmd->add_option("--data", data, "Directory of training PNGs")->required();
  train_cmd->add_option("--out", out, "Output directory")->required();
  train_cmd->add_option("--config", config, "JSON config file");
  train_cmd->add_option("--resume", resume, "Checkpoint to continue from");
  train_cmd->add_option("--seed", seed, "Training seed (overrides the config)");
  train_cmd->add_option("--iterations", train_iterations, "Total iterations (overrides the config)");

  auto* inpaint_cmd = app.add_subcommand("inpaint", "Fill the holes of one image");
  inpaint_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  inpaint_cmd->add_option("--image", image, "Damaged image (PNG)")->required();
  inpaint_cmd->add_option("--mask", mask, "central, three_squares or a mask PNG")->required();
  inpaint_cmd->add_option("--out", out, "Output directory")->required();
  inpaint_cmd->add_option("--config", config, "JSON config file");
  inpaint_cmd->add_option("--blend", blend, "overlay or poisson")->check(CLI::IsMember({"overlay", "poisson"}));
  inpaint_cmd->add_option("--restarts", restarts, "Random restarts of the latent search");
  inpaint_cmd->add_option("--seed", seed, "Seed for the initial latent codes");
  inpaint_cmd->add_option("--iterations", inpaint_iterations, "Optimizer iterations per restart");

  auto* eval_cmd = app.add_subcommand("eval", "Compare results with ground truth");
  eval_cmd->add_option("--results", results, "Directory of inpainted PNGs")->required();
  eval_cmd->add_option("--truth", truth, "Directory of ground-truth PNGs")->required();
  eval_cmd->add_option("--out", out, "Metrics CSV")->required();

  auto* generate_cmd = app.add_subcommand("generate", "Sample images from a checkpoint");
  generate_cmd->add_option("--ckpt", ckpt, "Checkpoint file")->required();
  generate_cmd->add_option("--out", out, "Output directory")->required();
  generate_cmd->add_option("--count", count, "Number of samples");
  generate_cmd->add_option("--seed", gen_seed, "Sampling seed");

  auto* mask_cmd = app.add_subcommand("mask", "Write a named mask as PNG");
  mask_cmd->add_option("--kind", kind, "central or three_squares")->required();
  mask_cmd->add_option("--size", size, "Image side length");
  mask_cmd->add_option("--out", out, "Output PNG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n";
    const CLI::App* failed = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    std::cerr << failed->help();
    return kBadArgs;
  }

  try {
    if (*train_cmd) return cmd_train(data, config, out, resume, seed, train_iterations);
    if (*inpaint_cmd)
      return cmd_inpaint(ckpt, image, mask, out, config, blend, restarts, seed, inpaint_iterations);
    if (*eval_cmd) return cmd_eval(results, truth, out);
    if (*generate_cmd) return cmd_generate(ckpt, out, count, gen_seed);
    if (*mask_cmd) return cmd_mask(kind, size, out);
  } catch (const IsolatedHoleError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kIsolatedHole;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumerical;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadArgs;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadArgs;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const ImageIoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kBadArgs;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kBadArgs;
}
