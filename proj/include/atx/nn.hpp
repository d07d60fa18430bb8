#pragma once

// Named parameter storage, SGD with momentum, and the checkpoint container
// shared by both networks: a text manifest followed by one TNSR block per
// tensor in manifest order.

#include <istream>
#include <ostream>
#include <utility>

#include "atx/ops.hpp"
#include "atx/rng.hpp"
#include "atx/tnsr.hpp"

namespace atx {

class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    if (find(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
    params_.emplace_back(name, std::move(t));
    return params_.back().second;
  }

  const Tensor& at(const std::string& name) const {
    if (const Tensor* t = find(name)) return *t;
    throw std::out_of_range("ParamStore: no parameter '" + name + "'");
  }

  const Tensor* find(const std::string& name) const {
    for (const auto& [n, t] : params_) {
      if (n == name) return &t;
    }
    return nullptr;
  }

  std::vector<std::pair<std::string, Tensor>>& items() { return params_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return params_; }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.second.size();
    return n;
  }

  void set_requires_grad(bool on) {
    for (auto& p : params_) p.second.set_requires_grad(on);
  }

  // Deep copy with fresh leaves.
  ParamStore clone(bool requires_grad) const {
    ParamStore out;
    for (const auto& [n, t] : params_) {
      out.add(n, Tensor(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), requires_grad));
    }
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
};

// He-style normal init scaled by fan-in.
inline Tensor init_normal(Rng& rng, Shape shape, double fan_in, double gain = 1.0) {
  Tensor t = rng.randn(shape);
  const double s = gain / std::sqrt(fan_in);
  std::vector<double> v(t.data().begin(), t.data().end());
  for (double& x : v) x *= s;
  return Tensor(std::move(shape), std::move(v));
}

class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum = 0.9, double clip_norm = 1.0)
      : lr_(lr), momentum_(momentum), clip_norm_(clip_norm) {}

  // Applies one update from the grads currently held by `params`. Gradients
  // are rescaled to a global L2 norm of at most clip_norm (0 disables).
  void step(ParamStore& params) {
    auto& items = params.items();
    if (velocity_.empty()) {
      for (const auto& p : items) velocity_.emplace_back(p.second.size(), 0.0);
    }
    double sq = 0.0;
    for (const auto& p : items) {
      if (!p.second.has_grad()) continue;
      for (double g : p.second.grad()) sq += g * g;
    }
    const double nrm = std::sqrt(sq);
    const double k = (clip_norm_ > 0.0 && nrm > clip_norm_) ? clip_norm_ / nrm : 1.0;
    for (std::size_t i = 0; i < items.size(); ++i) {
      Tensor& p = items[i].second;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_data();
      auto& v = velocity_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = momentum_ * v[j] + k * g[j];
        w[j] -= lr_ * v[j];
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  double lr_;
  double momentum_;
  double clip_norm_;
  std::vector<std::vector<double>> velocity_;
};

struct Checkpoint {
  std::string kind;
  std::vector<std::pair<std::string, std::string>> arch;
  std::vector<std::pair<std::string, std::string>> meta;
  ParamStore tensors;

  const std::string& arch_value(const std::string& key) const {
    for (const auto& [k, v] : arch) {
      if (k == key) return v;
    }
    throw FormatError("checkpoint: architecture key '" + key + "' missing");
  }

  const std::string* meta_value(const std::string& key) const {
    for (const auto& [k, v] : meta) {
      if (k == key) return &v;
    }
    return nullptr;
  }
};

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

namespace detail {

inline void check_token(const std::string& s, const char* what) {
  if (s.empty() || s.find_first_of(" \t\r\n") != std::string::npos) {
    throw FormatError(std::string("checkpoint: ") + what + " '" + s + "' must be a non-empty token without spaces");
  }
}

}  // namespace detail

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  detail::check_token(ck.kind, "kind");
  os << "ATXCKPT v1\n";
  os << "kind " << ck.kind << '\n';
  for (const auto& [k, v] : ck.arch) {
    detail::check_token(k, "arch key");
    detail::check_token(v, "arch value");
    os << "arch " << k << ' ' << v << '\n';
  }
  for (const auto& [k, v] : ck.meta) {
    detail::check_token(k, "meta key");
    detail::check_token(v, "meta value");
    os << "meta " << k << ' ' << v << '\n';
  }
  for (const auto& [name, t] : ck.tensors.items()) {
    detail::check_token(name, "tensor name");
    os << "tensor " << name << ' ' << t.ndim();
    for (std::size_t d : t.shape()) os << ' ' << d;
    os << '\n';
  }
  os << "end\n";
  for (const auto& item : ck.tensors.items()) write_tnsr(os, item.second);
  if (!os) throw FormatError("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  std::string line;
  if (!std::getline(is, line) || line != "ATXCKPT v1") throw FormatError("checkpoint: bad magic line");
  Checkpoint ck;
  std::vector<std::pair<std::string, Shape>> declared;
  bool ended = false;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "end") {
      ended = true;
      break;
    }
    std::string key, value;
    if (tag == "kind") {
      ls >> ck.kind;
    } else if (tag == "arch" || tag == "meta") {
      if (!(ls >> key >> value)) throw FormatError("checkpoint: malformed line '" + line + "'");
      (tag == "arch" ? ck.arch : ck.meta).emplace_back(key, value);
    } else if (tag == "tensor") {
      std::size_t nd = 0;
      if (!(ls >> key >> nd)) throw FormatError("checkpoint: malformed line '" + line + "'");
      Shape s(nd);
      for (auto& d : s) {
        if (!(ls >> d)) throw FormatError("checkpoint: malformed line '" + line + "'");
      }
      declared.emplace_back(key, s);
    } else {
      throw FormatError("checkpoint: unexpected manifest line '" + line + "'");
    }
  }
  if (!ended) throw FormatError("checkpoint: manifest not terminated");
  for (const auto& [name, s] : declared) {
    Tensor t = read_tnsr(is);
    if (t.shape() != s) throw FormatError("checkpoint: tensor '" + name + "' shape differs from manifest");
    ck.tensors.add(name, std::move(t));
  }
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open '" + path + "' for writing");
  write_checkpoint(os, ck);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open '" + path + "'");
  return read_checkpoint(is);
}

inline std::string checkpoint_bytes(const Checkpoint& ck) {
  std::ostringstream os(std::ios::binary);
  write_checkpoint(os, ck);
  return os.str();
}

}  // namespace atx
