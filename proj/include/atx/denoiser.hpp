#pragma once

// Label-conditional noise predictor eps(x_t, t, y): a small convolutional
// encoder-decoder with skip connections. A sinusoidal time embedding goes
// through a two-layer MLP; per-level projections of it shift every stage, and
// it is added to the bottleneck together with a learned per-label vector.

#include <cstdint>
#include <numbers>

#include "atx/diffusion.hpp"
#include "atx/nn.hpp"
#include "atx/synth.hpp"

namespace atx {

struct DenoiserArch {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t w0 = 8;
  std::size_t w1 = 16;
  std::size_t w2 = 32;
  std::size_t num_labels = 8;
  std::size_t time_dim = 32;
  int timesteps = 60;
  std::string schedule = "respaced:0.4";  // schedule_by_name key, or "custom"

  void validate() const {
    if (image_size % 8 != 0 || image_size < 8) throw std::invalid_argument("DenoiserArch: image_size must be a multiple of 8");
    if (time_dim % 2 != 0) throw std::invalid_argument("DenoiserArch: time_dim must be even");
    if (channels == 0 || w0 == 0 || w1 == 0 || w2 == 0 || num_labels == 0 || timesteps < 1) {
      throw std::invalid_argument("DenoiserArch: sizes must be positive");
    }
  }

  std::vector<std::pair<std::string, std::string>> to_kv() const {
    return {{"image_size", std::to_string(image_size)}, {"channels", std::to_string(channels)},
            {"widths", std::to_string(w0) + "," + std::to_string(w1) + "," + std::to_string(w2)},
            {"num_labels", std::to_string(num_labels)}, {"time_dim", std::to_string(time_dim)},
            {"timesteps", std::to_string(timesteps)}, {"schedule", schedule}};
  }

  static DenoiserArch from_checkpoint(const Checkpoint& ck) {
    DenoiserArch a;
    auto num = [&](const char* k) { return static_cast<std::size_t>(std::stoul(ck.arch_value(k))); };
    a.image_size = num("image_size");
    a.channels = num("channels");
    a.num_labels = num("num_labels");
    a.time_dim = num("time_dim");
    a.timesteps = std::stoi(ck.arch_value("timesteps"));
    a.schedule = ck.arch_value("schedule");
    const std::string& w = ck.arch_value("widths");
    if (std::sscanf(w.c_str(), "%zu,%zu,%zu", &a.w0, &a.w1, &a.w2) != 3) {
      throw FormatError("denoiser checkpoint: malformed widths '" + w + "'");
    }
    a.validate();
    return a;
  }
};

// Sinusoidal embedding of integer timesteps -> [n, dim].
inline Tensor timestep_embedding(const std::vector<int>& ts, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> v(ts.size() * dim);
  for (std::size_t i = 0; i < ts.size(); ++i)
    for (std::size_t k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double a = static_cast<double>(ts[i]) * freq;
      v[i * dim + k] = std::sin(a);
      v[i * dim + half + k] = std::cos(a);
    }
  return Tensor(Shape{ts.size(), dim}, std::move(v));
}

class Denoiser {
 public:
  Denoiser() = default;

  static Denoiser init(const DenoiserArch& arch, std::uint64_t seed) {
    arch.validate();
    Denoiser d;
    d.arch_ = arch;
    Rng rng(derive_seed(seed, 0xDE));
    auto conv = [&](const std::string& name, std::size_t co, std::size_t ci, double gain) {
      d.params_.add(name + ".w", init_normal(rng, {co, ci, 3, 3}, static_cast<double>(ci * 9), gain));
      d.params_.add(name + ".b", Tensor::zeros({co}));
    };
    const double he = std::sqrt(2.0);
    const std::size_t c = arch.channels;
    conv("in", arch.w0, c, he);
    conv("down1", arch.w1, arch.w0, he);
    conv("down2", arch.w2, arch.w1, he);
    conv("down3", arch.w2, arch.w2, he);
    d.params_.add("temb1.w", init_normal(rng, {arch.time_dim, arch.w2}, static_cast<double>(arch.time_dim), he));
    d.params_.add("temb1.b", Tensor::zeros({arch.w2}));
    d.params_.add("temb2.w", init_normal(rng, {arch.w2, arch.w2}, static_cast<double>(arch.w2), 1.0));
    d.params_.add("temb2.b", Tensor::zeros({arch.w2}));
    d.params_.add("label_emb", init_normal(rng, {arch.num_labels, arch.w2}, 1.0, 0.5));
    conv("mid", arch.w2, arch.w2, he);
    conv("up3", arch.w2, 2 * arch.w2, he);
    conv("up2", arch.w1, arch.w2 + arch.w1, he);
    conv("up1", arch.w0, arch.w1 + arch.w0, he);
    conv("out", c, arch.w0, 0.1);
    const std::pair<const char*, std::size_t> shifts[] = {{"in", arch.w0},    {"down1", arch.w1}, {"down2", arch.w2},
                                                          {"up3", arch.w2},   {"up2", arch.w1},   {"up1", arch.w0}};
    for (const auto& [name, width] : shifts) {
      d.params_.add(std::string("tshift.") + name + ".w", init_normal(rng, {arch.w2, width}, static_cast<double>(arch.w2)));
      d.params_.add(std::string("tshift.") + name + ".b", Tensor::zeros({width}));
    }
    return d;
  }

  static Denoiser from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "denoiser") throw FormatError("checkpoint kind '" + ck.kind + "' is not a denoiser");
    Denoiser d;
    d.arch_ = DenoiserArch::from_checkpoint(ck);
    const Denoiser ref = init(d.arch_, 0);
    for (const auto& [name, t] : ref.params_.items()) {
      const Tensor* got = ck.tensors.find(name);
      if (!got) throw FormatError("denoiser checkpoint: missing tensor '" + name + "'");
      if (got->shape() != t.shape()) throw FormatError("denoiser checkpoint: tensor '" + name + "' has wrong shape");
    }
    if (ck.tensors.items().size() != ref.params_.items().size()) {
      throw FormatError("denoiser checkpoint: unexpected extra tensors");
    }
    d.params_ = ck.tensors.clone(false);
    return d;
  }

  Checkpoint to_checkpoint(std::vector<std::pair<std::string, std::string>> meta = {}) const {
    Checkpoint ck;
    ck.kind = "denoiser";
    ck.arch = arch_.to_kv();
    ck.meta = std::move(meta);
    ck.tensors = params_.clone(false);
    return ck;
  }

  const DenoiserArch& arch() const { return arch_; }

  // The noise schedule the model was trained with.
  NoiseSchedule schedule() const {
    if (arch_.schedule == "custom") throw std::invalid_argument("denoiser: trained on an unnamed schedule");
    return schedule_by_name(arch_.schedule, arch_.timesteps);
  }

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Batched prediction: x [n, c, s, s] with one timestep and label per item.
  Tensor forward(const Tensor& x, const std::vector<int>& ts, const std::vector<int>& labels) const {
    const std::size_t s = arch_.image_size;
    if (x.ndim() != 4 || x.dim(1) != arch_.channels || x.dim(2) != s || x.dim(3) != s) {
      throw ShapeError("denoiser: expected input [n, " + std::to_string(arch_.channels) + ", " + std::to_string(s) +
                       ", " + std::to_string(s) + "], got " + shape_str(x.shape()));
    }
    const std::size_t n = x.dim(0);
    if (ts.size() != n || labels.size() != n) throw ShapeError("denoiser: need one timestep and label per item");
    for (int t : ts) {
      if (t < 0 || t >= arch_.timesteps) {
        throw std::out_of_range("denoiser: timestep " + std::to_string(t) + " outside [0, " +
                                std::to_string(arch_.timesteps) + ")");
      }
    }
    for (int y : labels) {
      if (y < 0 || static_cast<std::size_t>(y) >= arch_.num_labels) {
        throw std::out_of_range("denoiser: label " + std::to_string(y) + " outside [0, " +
                                std::to_string(arch_.num_labels) + ")");
      }
    }
    const auto& P = params_;
    auto conv = [&](const Tensor& in, const char* name, std::size_t stride) {
      return conv2d(in, P.at(std::string(name) + ".w"), P.at(std::string(name) + ".b"), stride, 1);
    };
    Tensor temb = linear(timestep_embedding(ts, arch_.time_dim), P.at("temb1.w"), P.at("temb1.b"));
    temb = linear(silu(temb), P.at("temb2.w"), P.at("temb2.b"));
    const Tensor tact = silu(temb);
    // conv, then a per-channel shift from the time embedding, then SiLU.
    auto stage = [&](const Tensor& in, const char* name, std::size_t stride) {
      const std::string p = std::string("tshift.") + name;
      return silu(add_channel(conv(in, name, stride), linear(tact, P.at(p + ".w"), P.at(p + ".b"))));
    };
    const Tensor h0 = stage(x, "in", 1);
    const Tensor h1 = stage(h0, "down1", 2);
    const Tensor h2 = stage(h1, "down2", 2);
    Tensor h3 = silu(conv(h2, "down3", 2));

    const Tensor emb = add(temb, take_rows(P.at("label_emb"), labels));
    h3 = silu(conv(add_channel(h3, emb), "mid", 1));

    Tensor u = stage(concat({upsample2x(h3), h2}, 1), "up3", 1);
    u = stage(concat({upsample2x(u), h1}, 1), "up2", 1);
    u = stage(concat({upsample2x(u), h0}, 1), "up1", 1);
    return conv(u, "out", 1);
  }

  // Single-image prediction: x [c, s, s].
  Tensor operator()(const Tensor& x, int t, int label) const {
    if (x.ndim() != 3) throw ShapeError("denoiser: expected image [c, h, w], got " + shape_str(x.shape()));
    const Shape shape = x.shape();
    const Tensor batched = reshape(x, {1, shape[0], shape[1], shape[2]});
    return reshape(forward(batched, {t}, {label}), shape);
  }

 private:
  DenoiserArch arch_;
  ParamStore params_;
};

inline Tensor eps_predict(const Denoiser& model, const Tensor& x_t, int t, int label) { return model(x_t, t, label); }

struct DenoiserTrainOptions {
  std::size_t batch = 16;
  double momentum = 0.9;
  double clip_norm = 1.0;
  std::size_t holdout = 32;
  bool cosine_decay = true;  // lr follows a half cosine from lr to 0
  DenoiserArch arch{};
  // Called every `report_every` steps with (step, running loss).
  std::function<void(std::size_t, double)> on_report;
  std::size_t report_every = 100;
};

namespace detail {

inline Tensor stack_images(const std::vector<const Tensor*>& images) {
  const Shape& s = images.front()->shape();
  std::vector<double> v;
  v.reserve(images.size() * images.front()->size());
  for (const Tensor* t : images) {
    if (t->shape() != s) throw ShapeError("stack_images: images differ in shape");
    v.insert(v.end(), t->data().begin(), t->data().end());
  }
  Shape out{images.size()};
  out.insert(out.end(), s.begin(), s.end());
  return Tensor(std::move(out), std::move(v));
}

struct NoisedBatch {
  Tensor x_t;
  Tensor eps;
  std::vector<int> ts;
  std::vector<int> labels;
};

inline NoisedBatch make_noised_batch(const std::vector<const SynthSample*>& items, const NoiseSchedule& sched, Rng& rng) {
  NoisedBatch b;
  std::vector<const Tensor*> imgs;
  for (const SynthSample* s : items) {
    imgs.push_back(&s->image);
    b.ts.push_back(static_cast<int>(rng.index(static_cast<std::size_t>(sched.steps()))));
    b.labels.push_back(s->label);
  }
  const Tensor x0 = stack_images(imgs);
  b.eps = rng.randn(x0.shape());
  const std::size_t per = x0.size() / items.size();
  std::vector<double> xt(x0.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const double ab = sched.alpha_bar[static_cast<std::size_t>(b.ts[i])];
    const double a = std::sqrt(ab), c = std::sqrt(1.0 - ab);
    for (std::size_t j = 0; j < per; ++j) xt[i * per + j] = a * x0[i * per + j] + c * b.eps[i * per + j];
  }
  b.x_t = Tensor(x0.shape(), std::move(xt));
  return b;
}

inline Tensor batch_loss(const Denoiser& model, const NoisedBatch& b) {
  const Tensor pred = model.forward(b.x_t, b.ts, b.labels);
  return scale(squared_error(pred, b.eps), 1.0 / static_cast<double>(b.eps.size()));
}

}  // namespace detail

struct DenoiserTrainResult {
  Denoiser model;
  Checkpoint checkpoint;
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
};

// Minimizes the noise-prediction objective with SGD + momentum. The last
// `holdout` samples of the dataset (at most 1/8 of it) are kept out of
// training and scored on a fixed noised batch before and after.
inline DenoiserTrainResult train_denoiser(const std::vector<SynthSample>& dataset, const NoiseSchedule& sched,
                                          std::size_t steps, double lr, std::uint64_t seed,
                                          DenoiserTrainOptions opt = {}) {
  if (dataset.empty()) throw std::invalid_argument("train_denoiser: empty dataset");
  if (steps == 0) throw std::invalid_argument("train_denoiser: steps must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("train_denoiser: lr must be positive");
  DenoiserArch arch = opt.arch;
  arch.timesteps = sched.steps();
  if (arch.schedule != "custom") {
    try {
      if (schedule_by_name(arch.schedule, arch.timesteps).beta != sched.beta) arch.schedule = "custom";
    } catch (const std::invalid_argument&) {
      arch.schedule = "custom";
    }
  }
  arch.image_size = dataset.front().image.dim(1);
  arch.channels = dataset.front().image.dim(0);

  const std::size_t n_hold = std::min(opt.holdout, dataset.size() / 8);
  const std::size_t n_train = dataset.size() - n_hold;
  std::vector<const SynthSample*> hold;
  for (std::size_t i = n_train; i < dataset.size(); ++i) hold.push_back(&dataset[i]);
  if (hold.empty()) hold.push_back(&dataset.back());

  Denoiser model = Denoiser::init(arch, seed);
  model.params().set_requires_grad(true);
  Rng hold_rng(derive_seed(seed, 0x401D));
  const detail::NoisedBatch hold_batch = detail::make_noised_batch(hold, sched, hold_rng);
  auto heldout = [&]() {
    const Denoiser frozen = Denoiser::from_checkpoint(model.to_checkpoint());
    return detail::batch_loss(frozen, hold_batch).item();
  };

  DenoiserTrainResult res;
  res.initial_heldout_loss = heldout();
  SgdMomentum opt_sgd(lr, opt.momentum, opt.clip_norm);
  Rng rng(derive_seed(seed, 0x7EA1));
  double running = 0.0;
  for (std::size_t step = 1; step <= steps; ++step) {
    std::vector<const SynthSample*> items;
    for (std::size_t i = 0; i < opt.batch; ++i) items.push_back(&dataset[rng.index(n_train)]);
    const detail::NoisedBatch b = detail::make_noised_batch(items, sched, rng);
    const Tensor loss = detail::batch_loss(model, b);
    backward(loss);
    if (opt.cosine_decay) {
      const double frac = static_cast<double>(step - 1) / static_cast<double>(steps);
      opt_sgd.set_lr(0.5 * lr * (1.0 + std::cos(std::numbers::pi * frac)));
    }
    opt_sgd.step(model.params());
    running = step == 1 ? loss.item() : 0.98 * running + 0.02 * loss.item();
    if (opt.on_report && step % opt.report_every == 0) opt.on_report(step, running);
  }
  res.final_heldout_loss = heldout();
  model.params().set_requires_grad(false);
  res.checkpoint = model.to_checkpoint({{"steps", std::to_string(steps)},
                                        {"lr", fmt_double(lr)},
                                        {"seed", std::to_string(seed)},
                                        {"initial_loss", fmt_double(res.initial_heldout_loss)},
                                        {"final_loss", fmt_double(res.final_heldout_loss)}});
  res.model = Denoiser::from_checkpoint(res.checkpoint);
  return res;
}

}  // namespace atx
