#pragma once

#include "uvseg/raster.hpp"
#include "uvseg/tensor.hpp"

namespace uvs {

/// 3 x H x W tensor, per-channel standardised with ImageNet statistics.
Tensor image_to_tensor(const RgbImage& image);

/// 1 x H x W tensor holding the mask values as 0.0 / 1.0.
Tensor mask_to_tensor(const BinaryMask& mask);

} // namespace uvs
