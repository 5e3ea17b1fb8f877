#pragma once

// Shared test helpers: finite-difference gradients and brute-force oracles
// that share no code with the library implementations they check.

#include "uvseg/autograd.hpp"
#include "uvseg/raster.hpp"
#include "uvseg/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace uvs::support {

inline BinaryMask random_mask(std::size_t h, std::size_t w, double p, Rng& rng)
{
    BinaryMask m(h, w);
    for (auto& v : m.data) v = rng.uniform() < p ? 1 : 0;
    return m;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

/// Worst relative error between the analytic gradient of `loss()` w.r.t.
/// `wrt` and central differences, over at most `max_checks` evenly spaced elements.
/// The denominator is floored at `floor` so near-zero gradients compare absolutely.
inline double gradient_error(const std::function<ag::Var()>& loss, ag::Var wrt, std::size_t max_checks = 64,
                             double h = 1e-5, double floor = 1e-6)
{
    wrt.zero_grad();
    const ag::Var out = loss();
    ag::backward(out);
    const Tensor analytic = wrt.has_grad() ? wrt.grad() : Tensor(wrt.shape());
    const std::size_t n = wrt.value().size();
    const std::size_t step = std::max<std::size_t>(1, n / max_checks);
    double worst = 0.0;
    for (std::size_t i = 0; i < n; i += step) {
        double& x = wrt.mutable_value()[i];
        const double x0 = x;
        x = x0 + h;
        const double up = loss().value()[0];
        x = x0 - h;
        const double down = loss().value()[0];
        x = x0;
        const double numeric = (up - down) / (2 * h);
        const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
        worst = std::max(worst, std::abs(numeric - analytic[i]) / denom);
    }
    return worst;
}

struct FloodRegion {
    std::size_t area = 0;
    std::size_t x_min = 0, y_min = 0, x_max = 0, y_max = 0; // half-open
    std::vector<std::pair<std::size_t, std::size_t>> pixels;  // (y, x)
};

/// Stack-based flood fill in raster order of seed pixels.
inline std::vector<FloodRegion> flood_regions(const BinaryMask& m, int connectivity)
{
    std::vector<char> seen(m.data.size(), 0);
    std::vector<FloodRegion> out;
    for (std::size_t y0 = 0; y0 < m.height; ++y0)
        for (std::size_t x0 = 0; x0 < m.width; ++x0) {
            if (!m.at(y0, x0) || seen[y0 * m.width + x0]) continue;
            FloodRegion r;
            r.x_min = x0;
            r.y_min = y0;
            std::vector<std::pair<long, long>> stack{{static_cast<long>(y0), static_cast<long>(x0)}};
            seen[y0 * m.width + x0] = 1;
            while (!stack.empty()) {
                const auto [y, x] = stack.back();
                stack.pop_back();
                r.pixels.emplace_back(y, x);
                r.x_min = std::min<std::size_t>(r.x_min, x);
                r.y_min = std::min<std::size_t>(r.y_min, y);
                r.x_max = std::max<std::size_t>(r.x_max, x + 1);
                r.y_max = std::max<std::size_t>(r.y_max, y + 1);
                for (long dy = -1; dy <= 1; ++dy)
                    for (long dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        if (connectivity == 4 && dy != 0 && dx != 0) continue;
                        const long ny = y + dy, nx = x + dx;
                        if (ny < 0 || nx < 0 || ny >= static_cast<long>(m.height) || nx >= static_cast<long>(m.width))
                            continue;
                        const std::size_t k = static_cast<std::size_t>(ny) * m.width + static_cast<std::size_t>(nx);
                        if (m.data[k] && !seen[k]) {
                            seen[k] = 1;
                            stack.emplace_back(ny, nx);
                        }
                    }
            }
            r.area = r.pixels.size();
            out.push_back(std::move(r));
        }
    return out;
}

inline std::filesystem::path fixture(const std::string& name)
{
    return std::filesystem::path(UVSEG_FIXTURES) / name;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name)
{
    const auto p = std::filesystem::temp_directory_path() / ("uvseg_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

} // namespace uvs::support
