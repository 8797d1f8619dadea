#pragma once

#include <string>
#include <vector>

#include "ssmavs/tensor.hpp"

namespace ssmavs {

enum class Direction : int {
  HWp, HWm, WHp, WHm,          // planar, per frame
  THWp, THWm, TWHp, TWHm,      // volumetric, spatial-first
  HWTp, HWTm, WHTp, WHTm,      // volumetric, temporal-first
  HTWp, HTWm, WTHp, WTHm,      // volumetric, extended set
};

std::string direction_name(Direction d);

struct ScaleShape {
  i64 h = 0;
  i64 w = 0;

  bool operator==(const ScaleShape&) const = default;
};

// One serialized scan order over the canonical source stack. The canonical
// stack concatenates the scales fine-to-coarse, each flattened row-major
// over [T,h,w]; when audio participates its T rows sit after all visual
// rows, so source row V+t is audio frame t.
struct SeqSpec {
  Direction dir;
  std::vector<i64> perm;        // sequence position -> source row
  std::vector<i64> visual_inv;  // canonical visual row -> sequence position
  std::vector<i64> audio_pos;   // audio frame -> sequence position
};

struct LayoutSpec {
  std::vector<SeqSpec> seqs;
  i64 visual_rows = 0;  // V = sum_i T*h_i*w_i
  i64 audio_rows = 0;   // T when audio rides along, else 0
  i64 seq_len = 0;      // common length of every sequence
  i64 seg_len = 0;      // state-reset period within a sequence (0 = none)
};

// Per-frame cross-scale serialization in [HW+, WH+, HW-, WH-]. Each frame
// is an independent segment; segments are laid out frame-major. Reversal
// acts within a frame. With audio, the frame's audio token is appended
// after the (possibly reversed) visual tokens of that frame in every
// direction.
LayoutSpec layout_ss2d(const std::vector<ScaleShape>& scales, i64 T,
                       bool audio);

// Whole-clip cross-scale serialization. direction_count selects a prefix of
// [THW+-, TWH+-, HWT+-, WHT+-, HTW+-, WTH+-] and must be one of
// {2,4,6,8,10,12}. Reversal flips the entire cross-scale sequence.
LayoutSpec layout_3d(const std::vector<ScaleShape>& scales, i64 T,
                     int direction_count);

// Single-scale whole-clip serialization in [THW+, TWH+, THW-, TWH-] with
// the T audio rows attached. Appended audio sits last in the forward
// sequences and the "-" sequences are full reversals (audio leads,
// reversed). Prepended audio sits first in every direction: the "-"
// sequences reverse the audio prefix and the visual suffix separately.
LayoutSpec layout_temporal_audio(ScaleShape scale, i64 T, bool prepend);

i64 layout_m(const std::vector<ScaleShape>& scales);
i64 layout_m_prime(const std::vector<ScaleShape>& scales, i64 T);

// Decodes a canonical source row back to its coordinates.
struct RowCoord {
  i64 scale = -1;  // -1 for audio rows
  i64 t = 0;
  i64 y = 0;
  i64 x = 0;
  bool is_audio = false;
};
RowCoord decode_row(const std::vector<ScaleShape>& scales, i64 T, i64 row);

}  // namespace ssmavs
