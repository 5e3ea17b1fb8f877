#include "uvseg/components.hpp"

#include "uvseg/error.hpp"

#include <numeric>

namespace uvs {

namespace {

struct DisjointSet {
    std::vector<int> parent;

    int make()
    {
        parent.push_back(static_cast<int>(parent.size()));
        return parent.back();
    }
    int find(int a)
    {
        while (parent[a] != a) {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        return a;
    }
    void unite(int a, int b)
    {
        a = find(a);
        b = find(b);
        if (a == b) return;
        if (a < b)
            parent[b] = a;
        else
            parent[a] = b;
    }
};

} // namespace

Labeling label_components(const BinaryMask& mask, int connectivity)
{
    if (connectivity != 4 && connectivity != 8) throw InvalidInput("connectivity must be 4 or 8");
    Labeling out;
    out.height = mask.height;
    out.width = mask.width;
    out.labels.assign(mask.height * mask.width, 0);
    if (mask.data.empty()) return out;

    const long h = static_cast<long>(mask.height), w = static_cast<long>(mask.width);
    DisjointSet ds;
    ds.make(); // slot 0 is background
    auto label_at = [&](long y, long x) -> int {
        if (y < 0 || x < 0 || x >= w) return 0;
        return out.labels[static_cast<std::size_t>(y * w + x)];
    };
    for (long y = 0; y < h; ++y)
        for (long x = 0; x < w; ++x) {
            if (!mask.data[static_cast<std::size_t>(y * w + x)]) continue;
            int neighbours[4] = {label_at(y, x - 1), label_at(y - 1, x), 0, 0};
            if (connectivity == 8) {
                neighbours[2] = label_at(y - 1, x - 1);
                neighbours[3] = label_at(y - 1, x + 1);
            }
            int chosen = 0;
            for (int n : neighbours)
                if (n && (!chosen || n < chosen)) chosen = n;
            if (!chosen) chosen = ds.make();
            for (int n : neighbours)
                if (n) ds.unite(chosen, n);
            out.labels[static_cast<std::size_t>(y * w + x)] = chosen;
        }

    // Resolve provisional labels to dense ids in raster order of first pixel.
    std::vector<int> dense(ds.parent.size(), 0);
    int next = 0;
    for (auto& l : out.labels) {
        if (!l) continue;
        const int root = ds.find(l);
        if (!dense[root]) dense[root] = ++next;
        l = dense[root];
    }
    out.components.resize(static_cast<std::size_t>(next));
    std::vector<double> sx(out.components.size(), 0.0), sy(out.components.size(), 0.0);
    for (auto& c : out.components) {
        c.x_min = mask.width;
        c.y_min = mask.height;
    }
    for (std::size_t y = 0; y < mask.height; ++y)
        for (std::size_t x = 0; x < mask.width; ++x) {
            const int l = out.labels[y * mask.width + x];
            if (!l) continue;
            Component& c = out.components[static_cast<std::size_t>(l - 1)];
            ++c.area;
            c.x_min = std::min(c.x_min, x);
            c.y_min = std::min(c.y_min, y);
            c.x_max = std::max(c.x_max, x + 1);
            c.y_max = std::max(c.y_max, y + 1);
            sx[static_cast<std::size_t>(l - 1)] += static_cast<double>(x) + 0.5;
            sy[static_cast<std::size_t>(l - 1)] += static_cast<double>(y) + 0.5;
        }
    for (std::size_t i = 0; i < out.components.size(); ++i) {
        out.components[i].centroid_x = sx[i] / static_cast<double>(out.components[i].area);
        out.components[i].centroid_y = sy[i] / static_cast<double>(out.components[i].area);
    }
    return out;
}

std::vector<BinaryMask> split_regions(const BinaryMask& mask, int connectivity)
{
    const Labeling lab = label_components(mask, connectivity);
    std::vector<BinaryMask> regions(lab.components.size(), BinaryMask(mask.height, mask.width));
    for (std::size_t i = 0; i < lab.labels.size(); ++i)
        if (lab.labels[i]) regions[static_cast<std::size_t>(lab.labels[i] - 1)].data[i] = 1;
    return regions;
}

} // namespace uvs
