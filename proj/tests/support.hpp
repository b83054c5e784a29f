#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "n2p/autodiff.hpp"
#include "n2p/rng.hpp"

namespace n2p::test {

inline Matrix<double> random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo = -1.0, double hi = 1.0) {
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

struct GradCheck {
  double max_rel = 0.0;
  int checked = 0;
  int skipped = 0;  // coordinates whose probes crossed a kink
};

/// Central differences over every parameter entry. `build` records a scalar
/// loss on a fresh graph. Coordinates whose +h or -h probe lands on a
/// different smooth piece than the base point are skipped.
inline GradCheck grad_check(std::span<Parameter<double>> params, const std::function<Var(Graph<double>&)>& build,
                            double h = 1e-4, double floor = 1e-6) {
  for (auto& p : params) p.zero_grad();
  Graph<double> g;
  const Var out = build(g);
  const std::uint64_t base_sig = g.kink_signature();
  g.backward(out);
  std::vector<Matrix<double>> analytic;
  for (auto& p : params) analytic.push_back(p.grad);

  auto probe = [&](std::uint64_t& sig) {
    Graph<double> gp;
    const Var o = build(gp);
    sig = gp.kink_signature();
    return gp.scalar(o);
  };
  GradCheck res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& v = params[k].value;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double x0 = v.data()[i];
      std::uint64_t sp = 0, sm = 0;
      v.data()[i] = x0 + h;
      const double fp = probe(sp);
      v.data()[i] = x0 - h;
      const double fm = probe(sm);
      v.data()[i] = x0;
      if (sp != base_sig || sm != base_sig) {
        ++res.skipped;
        continue;
      }
      const double num = (fp - fm) / (2.0 * h);
      const double ana = analytic[k].data()[i];
      const double rel = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), floor});
      res.max_rel = std::max(res.max_rel, rel);
      ++res.checked;
    }
  }
  return res;
}

/// Same check for losses recorded on a graph the caller does not own.
/// `eval` returns the loss and fills the kink signature; `analytic` holds
/// the gradients at the base point, one matrix per parameter.
inline GradCheck grad_check_eval(std::span<Parameter<double>> params, const std::vector<Matrix<double>>& analytic,
                                 std::uint64_t base_sig, const std::function<double(std::uint64_t&)>& eval,
                                 double h = 1e-4, double floor = 1e-6) {
  GradCheck res;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& v = params[k].value;
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double x0 = v.data()[i];
      std::uint64_t sp = 0, sm = 0;
      v.data()[i] = x0 + h;
      const double fp = eval(sp);
      v.data()[i] = x0 - h;
      const double fm = eval(sm);
      v.data()[i] = x0;
      if (sp != base_sig || sm != base_sig) {
        ++res.skipped;
        continue;
      }
      const double num = (fp - fm) / (2.0 * h);
      const double ana = analytic[k].data()[i];
      res.max_rel = std::max(res.max_rel, std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), floor}));
      ++res.checked;
    }
  }
  return res;
}

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("n2p_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace n2p::test
