#pragma once

// Micro vision transformer. The image is cut into p x p patches, linearly
// embedded, prefixed with a learned [CLS] token and given learned position
// embeddings. Pre-norm blocks (single-head attention + GELU MLP) follow.
// Exposed features: the per-patch key vectors of one block and the final
// normalized [CLS] token.

#include <cstdint>

#include "atx/nn.hpp"
#include "atx/synth.hpp"

namespace atx {

struct FeatureArch {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t dim = 32;
  std::size_t blocks = 2;
  std::size_t mlp = 64;
  std::size_t num_classes = 8;
  std::size_t key_layer = 2;  // 1-based block index supplying keys

  std::size_t num_patches() const { return (image_size / patch) * (image_size / patch); }

  void validate() const {
    if (patch == 0 || image_size % patch != 0) throw std::invalid_argument("FeatureArch: image_size must be a multiple of patch");
    if (channels == 0 || dim == 0 || blocks == 0 || mlp == 0 || num_classes == 0) {
      throw std::invalid_argument("FeatureArch: sizes must be positive");
    }
    if (key_layer < 1 || key_layer > blocks) throw std::invalid_argument("FeatureArch: key_layer must lie in [1, blocks]");
  }

  std::vector<std::pair<std::string, std::string>> to_kv() const {
    return {{"image_size", std::to_string(image_size)}, {"channels", std::to_string(channels)},
            {"patch", std::to_string(patch)},           {"dim", std::to_string(dim)},
            {"blocks", std::to_string(blocks)},         {"mlp", std::to_string(mlp)},
            {"num_classes", std::to_string(num_classes)}, {"key_layer", std::to_string(key_layer)}};
  }

  static FeatureArch from_checkpoint(const Checkpoint& ck) {
    FeatureArch a;
    auto num = [&](const char* k) { return static_cast<std::size_t>(std::stoul(ck.arch_value(k))); };
    a.image_size = num("image_size");
    a.channels = num("channels");
    a.patch = num("patch");
    a.dim = num("dim");
    a.blocks = num("blocks");
    a.mlp = num("mlp");
    a.num_classes = num("num_classes");
    a.key_layer = num("key_layer");
    a.validate();
    return a;
  }
};

struct FeatureSet {
  Tensor keys;  // [num_patches, dim]
  Tensor cls;   // [dim]
};

class FeatureNet {
 public:
  FeatureNet() = default;

  static FeatureNet init(const FeatureArch& arch, std::uint64_t seed) {
    arch.validate();
    FeatureNet f;
    f.arch_ = arch;
    Rng rng(derive_seed(seed, 0xF7));
    auto& P = f.params_;
    const std::size_t d = arch.dim, pd = arch.channels * arch.patch * arch.patch;
    P.add("patch.w", init_normal(rng, {pd, d}, static_cast<double>(pd)));
    P.add("patch.b", Tensor::zeros({d}));
    P.add("cls", init_normal(rng, {1, d}, 1.0, 0.02));
    P.add("pos", init_normal(rng, {arch.num_patches() + 1, d}, 1.0, 0.02));
    for (std::size_t b = 1; b <= arch.blocks; ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      P.add(p + "ln1.g", Tensor::full({d}, 1.0));
      P.add(p + "ln1.b", Tensor::zeros({d}));
      for (const char* m : {"q", "k", "v", "o"}) {
        P.add(p + m + ".w", init_normal(rng, {d, d}, static_cast<double>(d)));
        P.add(p + m + ".b", Tensor::zeros({d}));
      }
      P.add(p + "ln2.g", Tensor::full({d}, 1.0));
      P.add(p + "ln2.b", Tensor::zeros({d}));
      P.add(p + "fc1.w", init_normal(rng, {d, arch.mlp}, static_cast<double>(d)));
      P.add(p + "fc1.b", Tensor::zeros({arch.mlp}));
      P.add(p + "fc2.w", init_normal(rng, {arch.mlp, d}, static_cast<double>(arch.mlp)));
      P.add(p + "fc2.b", Tensor::zeros({d}));
    }
    P.add("ln.g", Tensor::full({d}, 1.0));
    P.add("ln.b", Tensor::zeros({d}));
    P.add("head.w", init_normal(rng, {d, arch.num_classes}, static_cast<double>(d)));
    P.add("head.b", Tensor::zeros({arch.num_classes}));
    return f;
  }

  static FeatureNet from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "feature") throw FormatError("checkpoint kind '" + ck.kind + "' is not a feature extractor");
    FeatureNet f;
    f.arch_ = FeatureArch::from_checkpoint(ck);
    const FeatureNet ref = init(f.arch_, 0);
    for (const auto& [name, t] : ref.params_.items()) {
      const Tensor* got = ck.tensors.find(name);
      if (!got) throw FormatError("feature checkpoint: missing tensor '" + name + "'");
      if (got->shape() != t.shape()) throw FormatError("feature checkpoint: tensor '" + name + "' has wrong shape");
    }
    if (ck.tensors.items().size() != ref.params_.items().size()) {
      throw FormatError("feature checkpoint: unexpected extra tensors");
    }
    f.params_ = ck.tensors.clone(false);
    return f;
  }

  Checkpoint to_checkpoint(std::vector<std::pair<std::string, std::string>> meta = {}) const {
    Checkpoint ck;
    ck.kind = "feature";
    ck.arch = arch_.to_kv();
    ck.meta = std::move(meta);
    ck.tensors = params_.clone(false);
    return ck;
  }

  const FeatureArch& arch() const { return arch_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  // Keys of the configured layer and the normalized final [CLS] token.
  FeatureSet extract(const Tensor& image) const {
    FeatureSet fs;
    const Tensor h = run(image, &fs.keys);
    fs.cls = reshape(slice(h, 0, 0, 1), {arch_.dim});
    return fs;
  }

  // Classification logits [1, num_classes] from the [CLS] token.
  Tensor logits(const Tensor& image) const {
    const Tensor h = run(image, nullptr);
    return linear(slice(h, 0, 0, 1), params_.at("head.w"), params_.at("head.b"));
  }

 private:
  // Returns the final normalized token matrix [1 + patches, dim].
  Tensor run(const Tensor& image, Tensor* keys_out) const {
    const std::size_t s = arch_.image_size;
    if (image.ndim() != 3 || image.dim(0) != arch_.channels || image.dim(1) != s || image.dim(2) != s) {
      throw ShapeError("feature net: expected image [" + std::to_string(arch_.channels) + ", " + std::to_string(s) +
                       ", " + std::to_string(s) + "], got " + shape_str(image.shape()));
    }
    const auto& P = params_;
    Tensor x = linear(patchify(image, arch_.patch), P.at("patch.w"), P.at("patch.b"));
    x = add(concat({P.at("cls"), x}, 0), P.at("pos"));
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(arch_.dim));
    for (std::size_t b = 1; b <= arch_.blocks; ++b) {
      const std::string p = "block" + std::to_string(b) + ".";
      auto lin = [&](const Tensor& in, const char* m) { return linear(in, P.at(p + m + ".w"), P.at(p + m + ".b")); };
      const Tensor hn = layer_norm(x, P.at(p + "ln1.g"), P.at(p + "ln1.b"));
      const Tensor q = lin(hn, "q"), k = lin(hn, "k"), v = lin(hn, "v");
      if (keys_out && b == arch_.key_layer) *keys_out = slice(k, 0, 1, k.dim(0));
      const Tensor att = softmax(scale(matmul(q, transpose(k)), inv_sqrt_d));
      x = add(x, lin(matmul(att, v), "o"));
      const Tensor hm = layer_norm(x, P.at(p + "ln2.g"), P.at(p + "ln2.b"));
      x = add(x, lin(gelu(lin(hm, "fc1")), "fc2"));
    }
    return layer_norm(x, P.at("ln.g"), P.at("ln.b"));
  }

  FeatureArch arch_;
  ParamStore params_;
};

inline FeatureSet extract(const FeatureNet& net, const Tensor& image) { return net.extract(image); }

struct ExtractorTrainOptions {
  std::size_t batch = 16;
  double lr = 0.05;
  double momentum = 0.9;
  double clip_norm = 1.0;
  std::size_t holdout = 64;
  FeatureArch arch{};
  std::function<void(std::size_t, double)> on_report;
  std::size_t report_every = 100;
};

struct ExtractorTrainResult {
  FeatureNet model;
  Checkpoint checkpoint;
  double heldout_accuracy = 0.0;
};

inline double classification_accuracy(const FeatureNet& net, const std::vector<const SynthSample*>& items) {
  if (items.empty()) throw std::invalid_argument("classification_accuracy: no samples");
  std::size_t hit = 0;
  for (const SynthSample* s : items) {
    const Tensor lg = net.logits(s->image);
    const auto v = lg.data();
    const auto best = static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
    hit += best == s->label ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(items.size());
}

// Supervised classification of the synthetic classes from the [CLS] token.
// The last `holdout` samples (at most 1/4 of the set) are scored for accuracy.
inline ExtractorTrainResult train_extractor(const std::vector<SynthSample>& dataset, std::size_t steps,
                                           std::uint64_t seed, ExtractorTrainOptions opt = {}) {
  if (dataset.empty()) throw std::invalid_argument("train_extractor: empty dataset");
  if (steps == 0) throw std::invalid_argument("train_extractor: steps must be >= 1");
  FeatureArch arch = opt.arch;
  arch.image_size = dataset.front().image.dim(1);
  arch.channels = dataset.front().image.dim(0);
  int max_label = 0;
  for (const auto& s : dataset) max_label = std::max(max_label, s.label);
  arch.num_classes = std::max(arch.num_classes, static_cast<std::size_t>(max_label) + 1);

  const std::size_t n_hold = std::min(opt.holdout, dataset.size() / 4);
  const std::size_t n_train = dataset.size() - n_hold;
  std::vector<const SynthSample*> hold;
  for (std::size_t i = n_train; i < dataset.size(); ++i) hold.push_back(&dataset[i]);
  if (hold.empty()) hold.push_back(&dataset.back());

  FeatureNet net = FeatureNet::init(arch, seed);
  net.params().set_requires_grad(true);
  SgdMomentum sgd(opt.lr, opt.momentum, opt.clip_norm);
  Rng rng(derive_seed(seed, 0xC1A5));
  double running = 0.0;
  for (std::size_t step = 1; step <= steps; ++step) {
    std::vector<Tensor> rows;
    std::vector<int> labels;
    for (std::size_t i = 0; i < opt.batch; ++i) {
      const SynthSample& s = dataset[rng.index(n_train)];
      rows.push_back(net.logits(s.image));
      labels.push_back(s.label);
    }
    const Tensor loss = cross_entropy(concat(rows, 0), labels);
    backward(loss);
    sgd.step(net.params());
    running = step == 1 ? loss.item() : 0.98 * running + 0.02 * loss.item();
    if (opt.on_report && step % opt.report_every == 0) opt.on_report(step, running);
  }
  net.params().set_requires_grad(false);
  ExtractorTrainResult res;
  res.model = FeatureNet::from_checkpoint(net.to_checkpoint());
  res.heldout_accuracy = classification_accuracy(res.model, hold);
  res.checkpoint = res.model.to_checkpoint({{"steps", std::to_string(steps)},
                                            {"lr", fmt_double(opt.lr)},
                                            {"seed", std::to_string(seed)},
                                            {"heldout_accuracy", fmt_double(res.heldout_accuracy)}});
  return res;
}

}  // namespace atx
