#include "nirsplat/metrics.hpp"

#include <array>
#include <cmath>

namespace nirsplat::metrics {

namespace {

constexpr int kWin = 11;

std::array<double, kWin> gaussian_window() {
    std::array<double, kWin> w{};
    double sum = 0.0;
    for (int i = 0; i < kWin; ++i) {
        const double d = i - kWin / 2;
        w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
        sum += w[i];
    }
    for (double& v : w) v /= sum;
    return w;
}

/// Valid-mode separable filtering of one channel.
std::vector<double> filter_valid(const std::vector<double>& src, int width, int height) {
    static const auto w = gaussian_window();
    const int ow = width - kWin + 1;
    const int oh = height - kWin + 1;
    std::vector<double> tmp(static_cast<std::size_t>(height) * ow, 0.0);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int k = 0; k < kWin; ++k) s += w[k] * src[static_cast<std::size_t>(y) * width + x + k];
            tmp[static_cast<std::size_t>(y) * ow + x] = s;
        }
    }
    std::vector<double> out(static_cast<std::size_t>(oh) * ow, 0.0);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int k = 0; k < kWin; ++k) s += w[k] * tmp[static_cast<std::size_t>(y + k) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = s;
        }
    }
    return out;
}

}  // namespace

double mse(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw ContractViolation("mse: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return s / static_cast<double>(a.data.size());
}

double psnr(const Image& a, const Image& b) {
    const double m = mse(a, b);
    if (m <= 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

double ssim(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw ContractViolation("ssim: shape mismatch");
    if (a.width < kWin || a.height < kWin) throw ContractViolation("ssim: image smaller than the 11x11 window");
    constexpr double c1 = 0.01 * 0.01;
    constexpr double c2 = 0.03 * 0.03;
    const std::size_t n = static_cast<std::size_t>(a.width) * a.height;
    double total = 0.0;
    for (int c = 0; c < a.channels; ++c) {
        std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = a.data[i * a.channels + c];
            y[i] = b.data[i * b.channels + c];
            xx[i] = x[i] * x[i];
            yy[i] = y[i] * y[i];
            xy[i] = x[i] * y[i];
        }
        const auto mx = filter_valid(x, a.width, a.height);
        const auto my = filter_valid(y, a.width, a.height);
        const auto sxx = filter_valid(xx, a.width, a.height);
        const auto syy = filter_valid(yy, a.width, a.height);
        const auto sxy = filter_valid(xy, a.width, a.height);
        double sum = 0.0;
        for (std::size_t i = 0; i < mx.size(); ++i) {
            const double vx = sxx[i] - mx[i] * mx[i];
            const double vy = syy[i] - my[i] * my[i];
            const double cxy = sxy[i] - mx[i] * my[i];
            sum += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2)) /
                   ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += sum / static_cast<double>(mx.size());
    }
    return total / a.channels;
}

}  // namespace nirsplat::metrics
