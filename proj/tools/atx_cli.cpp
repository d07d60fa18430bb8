// atx: command-line front end for the synthetic appearance-transfer pipeline.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "atx/atx.hpp"

namespace fs = std::filesystem;
using namespace atx;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<int> parse_labels(const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    tok = detail::trim(tok);
    if (tok.empty()) throw UsageError("empty label in '" + text + "'");
    if (std::isdigit(static_cast<unsigned char>(tok[0]))) {
      const int id = std::stoi(tok);
      synth_class_name(id);
      out.push_back(id);
    } else {
      out.push_back(synth_class_id(tok));
    }
  }
  if (out.empty()) throw UsageError("empty label list");
  return out;
}

int parse_label(const std::string& text) {
  const auto v = parse_labels(text);
  if (v.size() != 1) throw UsageError("expected a single label, got '" + text + "'");
  return v[0];
}

std::vector<SynthSample> load_dataset(const fs::path& dir) {
  std::ifstream is(dir / "manifest.txt");
  if (!is) throw std::runtime_error("no manifest.txt in '" + dir.string() + "'");
  std::vector<SynthSample> out;
  std::string path, label;
  while (is >> path >> label) {
    SynthSample s;
    s.image = ppm_read((dir / path).string());
    s.label = synth_class_id(label);
    out.push_back(std::move(s));
  }
  if (out.empty()) throw std::runtime_error("empty manifest in '" + dir.string() + "'");
  return out;
}

GuidanceConfig load_config(const std::string& path, std::uint64_t seed) {
  GuidanceConfig cfg = path.empty() ? GuidanceConfig{} : parse_config(path);
  cfg.seed = seed;
  return cfg;
}

NoiseSchedule model_schedule(const Denoiser& model, const GuidanceConfig& cfg) {
  if (cfg.T != model.arch().timesteps) {
    throw std::runtime_error("config T = " + std::to_string(cfg.T) + " but the denoiser was trained with " +
                             std::to_string(model.arch().timesteps) + " steps");
  }
  return model.schedule();
}

void write_lines(const fs::path& path, const std::vector<std::pair<std::string, std::string>>& lines) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write '" + path.string() + "'");
  for (const auto& [k, v] : lines) os << k << ' ' << v << '\n';
}

void report_progress(const char* what, std::size_t step, double loss) {
  std::cerr << what << " step " << step << " loss " << loss << '\n';
}

struct Args {
  std::uint64_t seed = 0;
  std::string out, config, data;
  std::string structure, appearance, mask, gt_mask, output;
  std::string ck_denoiser, ck_extractor;
  std::string positive, label;
  std::vector<std::string> negatives;
  bool auto_mask = false, trace = false, quiet = false;
  std::size_t n_per_class = 128, size = 32, steps = 0, batch = 16;
  double lr = 0.0;
  std::string schedule = "respaced:0.4";
  int T = 60;
};

MaskSet auto_mask(const Args& a, const Tensor& structure, const Denoiser& model, const GuidanceConfig& cfg,
                  const NoiseSchedule& sched) {
  if (a.positive.empty()) throw UsageError("--labels-positive is required to generate a mask");
  const int yp = parse_label(a.positive);
  std::vector<std::vector<int>> sets;
  for (const auto& n : a.negatives) sets.push_back(parse_labels(n));
  if (sets.empty()) sets = default_negative_sets();
  return generate_masks(structure, model, sched, yp, sets, cfg.theta_mask, derive_seed(cfg.seed, 0x11A5));
}

int cmd_gen_dataset(const Args& a) {
  const fs::path out(a.out);
  const auto data = gen_dataset(a.n_per_class, a.seed, a.size);
  std::ofstream manifest;
  fs::create_directories(out);
  manifest.open(out / "manifest.txt");
  for (const auto& s : data) {
    const std::string cls(synth_class_name(s.label));
    const std::string img = "images/" + cls + "/" + std::to_string(s.seed) + ".ppm";
    fs::create_directories(out / "images" / cls);
    ppm_write((out / img).string(), s.image);
    if (s.has_mask) {
      fs::create_directories(out / "masks" / cls);
      mask_write((out / "masks" / cls / (std::to_string(s.seed) + ".pgm")).string(), s.gt_mask);
    }
    manifest << img << ' ' << cls << '\n';
  }
  if (!manifest) throw std::runtime_error("cannot write manifest");
  std::cout << "wrote " << data.size() << " samples to " << out.string() << '\n';
  return 0;
}

int cmd_train_denoiser(const Args& a) {
  const auto data = load_dataset(a.data);
  DenoiserTrainOptions opt;
  opt.batch = a.batch;
  opt.arch.schedule = a.schedule;
  if (!a.quiet) opt.on_report = [](std::size_t s, double l) { report_progress("denoiser", s, l); };
  const NoiseSchedule sched = schedule_by_name(a.schedule, a.T);
  const auto r = train_denoiser(data, sched, a.steps ? a.steps : 2500, a.lr > 0 ? a.lr : 0.3, a.seed, opt);
  fs::create_directories(a.out);
  save_checkpoint((fs::path(a.out) / "denoiser.ck").string(), r.checkpoint);
  std::cout << "heldout_loss " << r.initial_heldout_loss << " -> " << r.final_heldout_loss << '\n';
  return 0;
}

int cmd_train_extractor(const Args& a) {
  const auto data = load_dataset(a.data);
  ExtractorTrainOptions opt;
  opt.batch = a.batch;
  if (a.lr > 0) opt.lr = a.lr;
  if (!a.quiet) opt.on_report = [](std::size_t s, double l) { report_progress("extractor", s, l); };
  const auto r = train_extractor(data, a.steps ? a.steps : 600, a.seed, opt);
  fs::create_directories(a.out);
  save_checkpoint((fs::path(a.out) / "extractor.ck").string(), r.checkpoint);
  std::cout << "heldout_accuracy " << r.heldout_accuracy << '\n';
  return 0;
}

int cmd_gen_mask(const Args& a) {
  const GuidanceConfig cfg = load_config(a.config, a.seed);
  const Denoiser model = Denoiser::from_checkpoint(load_checkpoint(a.ck_denoiser));
  const NoiseSchedule sched = model_schedule(model, cfg);
  const MaskSet ms = auto_mask(a, ppm_read(a.structure), model, cfg, sched);
  const fs::path out(a.out);
  fs::create_directories(out);
  std::vector<std::pair<std::string, std::string>> lines;
  for (std::size_t k = 0; k < ms.masks.size(); ++k) {
    const std::string name = "mask_" + std::to_string(k) + ".pgm";
    mask_write((out / name).string(), ms.masks[k].binary);
    save_tnsr((out / ("diff_" + std::to_string(k) + ".tnsr")).string(), ms.masks[k].diff_map);
    std::string labels;
    for (int l : ms.masks[k].negative_labels) labels += (labels.empty() ? "" : ",") + std::string(synth_class_name(l));
    lines.emplace_back(name, "negatives " + labels + " fraction " + fmt_double(ms.masks[k].fraction()));
  }
  mask_write((out / "mask.pgm").string(), ms.best().binary);
  lines.emplace_back("selected", std::to_string(ms.selected));
  write_lines(out / "masks.txt", lines);
  std::cout << "selected mask " << ms.selected << " fraction " << ms.best().fraction() << '\n';
  return 0;
}

int cmd_transfer(const Args& a) {
  if (a.mask.empty() && !a.auto_mask) throw UsageError("transfer needs --mask or --auto-mask");
  const GuidanceConfig cfg = load_config(a.config, a.seed);
  const Denoiser model = Denoiser::from_checkpoint(load_checkpoint(a.ck_denoiser));
  const FeatureNet fext = FeatureNet::from_checkpoint(load_checkpoint(a.ck_extractor));
  const NoiseSchedule sched = model_schedule(model, cfg);
  const Tensor xs = ppm_read(a.structure), xa = ppm_read(a.appearance);
  const Mask mask = a.auto_mask ? auto_mask(a, xs, model, cfg, sched).best() : mask_from_binary(mask_read(a.mask));
  int label = 0;
  if (!a.label.empty()) {
    label = parse_label(a.label);
  } else if (!a.positive.empty()) {
    label = parse_label(a.positive);
  } else {
    throw UsageError("transfer needs --label or --labels-positive");
  }
  const TransferResult r = transfer(xs, xa, mask, model, fext, cfg, sched, label);
  const fs::path out(a.out);
  fs::create_directories(out);
  ppm_write((out / "out.ppm").string(), r.output);
  mask_write((out / "mask.pgm").string(), mask.binary);
  if (a.trace) write_trace(r.trace, out / "trace");
  std::cout << "wrote " << (out / "out.ppm").string() << (r.trace.mask_skipped ? " (mask guidance skipped)" : "")
            << '\n';
  return 0;
}

int cmd_eval(const Args& a) {
  const Tensor out = ppm_read(a.output), xs = ppm_read(a.structure), xa = ppm_read(a.appearance);
  const Tensor mask = mask_read(a.mask);
  std::vector<double> inv(mask.size());
  for (std::size_t i = 0; i < inv.size(); ++i) inv[i] = mask[i] >= 0.5 ? 0.0 : 1.0;
  const Tensor outside(mask.shape(), std::move(inv));
  std::vector<std::pair<std::string, std::string>> lines = {
      {"cdh_in_mask_output_appearance", fmt_double(cdh_distance_masked(out, xa, mask))},
      {"cdh_in_mask_structure_appearance", fmt_double(cdh_distance_masked(xs, xa, mask))},
      {"cdh_output_appearance", fmt_double(cdh_distance(out, xa))},
      {"mean_abs_diff_inside", fmt_double(mean_abs_diff(out, xs, mask))},
      {"mean_abs_diff_outside", fmt_double(mean_abs_diff(out, xs, outside))},
  };
  if (!a.gt_mask.empty()) lines.emplace_back("mask_iou", fmt_double(mask_iou(mask, mask_read(a.gt_mask))));
  if (!a.ck_extractor.empty()) {
    if (a.label.empty()) throw UsageError("eval needs --label with --checkpoint-extractor");
    const FeatureNet fext = FeatureNet::from_checkpoint(load_checkpoint(a.ck_extractor));
    const double l = classifier_loss([&](const Tensor& x) { return fext.logits(x); }, out, parse_label(a.label));
    lines.emplace_back("classifier_loss", fmt_double(l));
  }
  const fs::path dir(a.out);
  fs::create_directories(dir);
  write_lines(dir / "report.txt", lines);
  for (const auto& [k, v] : lines) std::cout << k << ' ' << v << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"atx: synthetic structure-aware appearance transfer"};
  app.require_subcommand(1);
  Args a;

  auto seed = [&](CLI::App* c) { c->add_option("--seed", a.seed, "random seed")->required(); };
  auto out = [&](CLI::App* c) { c->add_option("--out", a.out, "output directory")->required(); };
  auto quiet = [&](CLI::App* c) { c->add_flag("--quiet", a.quiet, "no progress output"); };

  auto* gd = app.add_subcommand("gen-dataset", "render the synthetic dataset");
  seed(gd);
  out(gd);
  gd->add_option("--n-per-class", a.n_per_class, "samples per class")->check(CLI::PositiveNumber);
  gd->add_option("--size", a.size, "image side in pixels")->check(CLI::Range(8, 64));

  auto* td = app.add_subcommand("train-denoiser", "train the label-conditioned denoiser");
  seed(td);
  out(td);
  quiet(td);
  td->add_option("--data", a.data, "dataset directory")->required();
  td->add_option("--steps", a.steps, "SGD steps (default 2500)");
  td->add_option("--lr", a.lr, "learning rate (default 0.3)");
  td->add_option("--batch", a.batch, "batch size")->check(CLI::PositiveNumber);
  td->add_option("--schedule", a.schedule, "noise schedule: linear or respaced:<span>");
  td->add_option("--T", a.T, "diffusion steps")->check(CLI::Range(2, 1000));

  auto* te = app.add_subcommand("train-extractor", "train the feature extractor");
  seed(te);
  out(te);
  quiet(te);
  te->add_option("--data", a.data, "dataset directory")->required();
  te->add_option("--steps", a.steps, "SGD steps (default 600)");
  te->add_option("--lr", a.lr, "learning rate (default 0.05)");
  te->add_option("--batch", a.batch, "batch size")->check(CLI::PositiveNumber);

  auto* gm = app.add_subcommand("gen-mask", "derive a foreground mask from the denoiser");
  seed(gm);
  out(gm);
  gm->add_option("--config", a.config, "guidance config file");
  gm->add_option("--structure", a.structure, "structure image (PPM)")->required();
  gm->add_option("--checkpoint-denoiser", a.ck_denoiser, "denoiser checkpoint")->required();
  gm->add_option("--labels-positive", a.positive, "positive label")->required();
  gm->add_option("--labels-negative", a.negatives, "comma-separated negative labels (repeatable)");

  auto* tr = app.add_subcommand("transfer", "transfer appearance onto the structure image");
  seed(tr);
  out(tr);
  tr->add_option("--config", a.config, "guidance config file");
  tr->add_option("--structure", a.structure, "structure image (PPM)")->required();
  tr->add_option("--appearance", a.appearance, "appearance image (PPM)")->required();
  auto* mask_opt = tr->add_option("--mask", a.mask, "foreground mask (PGM)");
  tr->add_flag("--auto-mask", a.auto_mask, "generate the mask from the denoiser")->excludes(mask_opt);
  tr->add_option("--checkpoint-denoiser", a.ck_denoiser, "denoiser checkpoint")->required();
  tr->add_option("--checkpoint-extractor", a.ck_extractor, "extractor checkpoint")->required();
  tr->add_option("--label", a.label, "conditioning label for sampling (default: positive label)");
  tr->add_option("--labels-positive", a.positive, "positive label for the mask");
  tr->add_option("--labels-negative", a.negatives, "comma-separated negative labels (repeatable)");
  tr->add_flag("--trace", a.trace, "write per-step latents under <out>/trace");

  auto* ev = app.add_subcommand("eval", "score a transfer output");
  out(ev);
  ev->add_option("--output", a.output, "transfer output (PPM)")->required();
  ev->add_option("--structure", a.structure, "structure image (PPM)")->required();
  ev->add_option("--appearance", a.appearance, "appearance image (PPM)")->required();
  ev->add_option("--mask", a.mask, "mask used for the transfer (PGM)")->required();
  ev->add_option("--gt-mask", a.gt_mask, "ground-truth mask (PGM)");
  ev->add_option("--checkpoint-extractor", a.ck_extractor, "extractor checkpoint for classifier loss");
  ev->add_option("--label", a.label, "target label for classifier loss");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << app.help();
    return 2;
  }

  try {
    if (gd->parsed()) return cmd_gen_dataset(a);
    if (td->parsed()) return cmd_train_denoiser(a);
    if (te->parsed()) return cmd_train_extractor(a);
    if (gm->parsed()) return cmd_gen_mask(a);
    if (tr->parsed()) return cmd_transfer(a);
    if (ev->parsed()) return cmd_eval(a);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
