#pragma once

#include "uvseg/autograd.hpp"

#include <string>
#include <vector>

namespace uvs {

/// Axis-aligned pixel box with half-open extents [x_min, x_max) x [y_min, y_max).
struct Box {
    long x_min = 0, y_min = 0, x_max = 0, y_max = 0;
    friend bool operator==(const Box&, const Box&) = default;
};

struct BoxSet {
    std::vector<Box> boxes; // sorted by (y_min, x_min)
    std::string tile_id;
    bool empty() const noexcept { return boxes.empty(); }
    std::size_t size() const noexcept { return boxes.size(); }
};

enum class TokenSource { box_corner, mask_summary, semantic, sentinel };

const char* token_source_name(TokenSource s);

enum class MixerKind { add, mlp };

const char* mixer_name(MixerKind m);
MixerKind parse_mixer(const std::string& s);

/// Prompt tokens handed to the mask decoder, T' x D.
struct MixedPrompt {
    ag::Var tokens;
    MixerKind mixer = MixerKind::add;
    std::vector<TokenSource> provenance;
};

} // namespace uvs
