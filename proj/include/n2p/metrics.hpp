#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "n2p/error.hpp"

namespace n2p {

inline constexpr double kPsnrCap = 100.0;

/// 10 log10(1 / MSE) for images in [0, 1]; identical images give kPsnrCap.
inline double psnr(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("psnr: image sizes differ or are empty");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  const double mse = s / static_cast<double>(a.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2,
/// C2 = 0.03^2, over window positions fully inside the image, averaged over
/// channels. Images smaller than the window use a window clipped to fit.
inline double ssim(std::span<const float> a, std::span<const float> b, int width, int height, int channels) {
  const std::size_t n = static_cast<std::size_t>(width) * height * channels;
  if (a.size() != n || b.size() != n || n == 0) throw ShapeError("ssim: image sizes do not match");
  const int radius = std::min({5, (width - 1) / 2, (height - 1) / 2});
  const int k = 2 * radius + 1;
  std::vector<double> win(static_cast<std::size_t>(k) * k);
  double wsum = 0.0;
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) {
      const double dx = x - radius, dy = y - radius;
      wsum += win[static_cast<std::size_t>(y * k + x)] = std::exp(-(dx * dx + dy * dy) / (2 * 1.5 * 1.5));
    }
  for (auto& w : win) w /= wsum;
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  double total = 0.0;
  long count = 0;
  for (int c = 0; c < channels; ++c)
    for (int y = radius; y < height - radius; ++y)
      for (int x = radius; x < width - radius; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int j = 0; j < k; ++j)
          for (int i = 0; i < k; ++i) {
            const double w = win[static_cast<std::size_t>(j * k + i)];
            const std::size_t idx = (static_cast<std::size_t>(y + j - radius) * width + (x + i - radius)) * channels + c;
            const double va = a[idx], vb = b[idx];
            ma += w * va;
            mb += w * vb;
            saa += w * va * va;
            sbb += w * vb * vb;
            sab += w * va * vb;
          }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        ++count;
      }
  return total / static_cast<double>(count);
}

}  // namespace n2p
