#include "uvseg/preprocess.hpp"

namespace uvs {

Tensor image_to_tensor(const RgbImage& image)
{
    static constexpr double mean[3] = {123.675, 116.28, 103.53};
    static constexpr double stddev[3] = {58.395, 57.12, 57.375};
    Tensor t({3, image.height, image.width});
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < image.height; ++y)
            for (std::size_t x = 0; x < image.width; ++x)
                t.at(c, y, x) = (static_cast<double>(image.at(y, x, c)) - mean[c]) / stddev[c];
    return t;
}

Tensor mask_to_tensor(const BinaryMask& mask)
{
    Tensor t({1, mask.height, mask.width});
    for (std::size_t i = 0; i < mask.data.size(); ++i) t[i] = mask.data[i] ? 1.0 : 0.0;
    return t;
}

} // namespace uvs
