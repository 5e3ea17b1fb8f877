#pragma once

#include "uvseg/raster.hpp"

#include <vector>

namespace uvs {

/// Statistics of one connected foreground component. Bounds are half-open:
/// the component occupies x in [x_min, x_max) and y in [y_min, y_max).
struct Component {
    std::size_t area = 0;
    std::size_t x_min = 0, y_min = 0, x_max = 0, y_max = 0;
    double centroid_x = 0.0; // pixel-centre coordinates
    double centroid_y = 0.0;
};

struct Labeling {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<int> labels; // 0 = background, k = components[k - 1]
    std::vector<Component> components;
};

/// Two-pass union-find labelling. Components are numbered in raster order of
/// their first pixel. `connectivity` must be 4 or 8.
Labeling label_components(const BinaryMask& mask, int connectivity = 8);

/// One full-size mask per connected component, in label order.
std::vector<BinaryMask> split_regions(const BinaryMask& mask, int connectivity = 8);

} // namespace uvs
