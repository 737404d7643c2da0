#pragma once

#include "nirsplat/common.hpp"

namespace nirsplat::metrics {

inline constexpr double kPsnrCap = 99.0;

double mse(const Image& a, const Image& b);
/// 10 log10(1 / MSE), capped at kPsnrCap (reached exactly for identical images).
double psnr(const Image& a, const Image& b);
/// Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, range 1) averaged over valid
/// window positions and over channels. Throws ContractViolation below 11x11.
double ssim(const Image& a, const Image& b);

}  // namespace nirsplat::metrics
