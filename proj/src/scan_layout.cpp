#include "ssmavs/scan_layout.hpp"

#include <algorithm>

namespace ssmavs {

namespace {

void check_geometry(const std::vector<ScaleShape>& scales, i64 T) {
  check(!scales.empty(), "layout: scale set must not be empty");
  check(T >= 1, "layout: T must be >= 1");
  for (const ScaleShape& s : scales) {
    check(s.h >= 1 && s.w >= 1, "layout: scale extents must be >= 1");
  }
}

std::vector<i64> scale_bases(const std::vector<ScaleShape>& scales, i64 T) {
  std::vector<i64> bases(scales.size() + 1, 0);
  for (size_t i = 0; i < scales.size(); ++i) {
    bases[i + 1] = bases[i] + T * scales[i].h * scales[i].w;
  }
  return bases;
}

// Fills visual_inv/audio_pos from perm. Every sequence covers each of its
// source rows exactly once.
void index_spec(SeqSpec& s, i64 visual_rows, i64 audio_rows) {
  s.visual_inv.assign(static_cast<size_t>(visual_rows), -1);
  s.audio_pos.assign(static_cast<size_t>(audio_rows), -1);
  for (size_t pos = 0; pos < s.perm.size(); ++pos) {
    const i64 row = s.perm[pos];
    check(row >= 0 && row < visual_rows + audio_rows,
          "layout: source row out of range");
    if (row < visual_rows) {
      check(s.visual_inv[static_cast<size_t>(row)] == -1,
            "layout: duplicate visual row");
      s.visual_inv[static_cast<size_t>(row)] = static_cast<i64>(pos);
    } else {
      check(s.audio_pos[static_cast<size_t>(row - visual_rows)] == -1,
            "layout: duplicate audio row");
      s.audio_pos[static_cast<size_t>(row - visual_rows)] =
          static_cast<i64>(pos);
    }
  }
  for (i64 v : s.visual_inv) check(v >= 0, "layout: missing visual row");
  for (i64 a : s.audio_pos) check(a >= 0, "layout: missing audio row");
}

void finish(LayoutSpec& spec) {
  check(!spec.seqs.empty(), "layout: no directions");
  spec.seq_len = static_cast<i64>(spec.seqs.front().perm.size());
  for (SeqSpec& s : spec.seqs) {
    check(static_cast<i64>(s.perm.size()) == spec.seq_len,
          "layout: direction length mismatch");
    index_spec(s, spec.visual_rows, spec.audio_rows);
  }
}

}  // namespace

std::string direction_name(Direction d) {
  switch (d) {
    case Direction::HWp: return "HW+";
    case Direction::HWm: return "HW-";
    case Direction::WHp: return "WH+";
    case Direction::WHm: return "WH-";
    case Direction::THWp: return "THW+";
    case Direction::THWm: return "THW-";
    case Direction::TWHp: return "TWH+";
    case Direction::TWHm: return "TWH-";
    case Direction::HWTp: return "HWT+";
    case Direction::HWTm: return "HWT-";
    case Direction::WHTp: return "WHT+";
    case Direction::WHTm: return "WHT-";
    case Direction::HTWp: return "HTW+";
    case Direction::HTWm: return "HTW-";
    case Direction::WTHp: return "WTH+";
    case Direction::WTHm: return "WTH-";
  }
  fail("direction_name: bad direction");
}

i64 layout_m(const std::vector<ScaleShape>& scales) {
  i64 m = 0;
  for (const ScaleShape& s : scales) m += s.h * s.w;
  return m;
}

i64 layout_m_prime(const std::vector<ScaleShape>& scales, i64 T) {
  return layout_m(scales) * T;
}

RowCoord decode_row(const std::vector<ScaleShape>& scales, i64 T, i64 row) {
  const std::vector<i64> bases = scale_bases(scales, T);
  RowCoord rc;
  if (row >= bases.back()) {
    rc.is_audio = true;
    rc.t = row - bases.back();
    rc.y = -1;
    rc.x = -1;
    return rc;
  }
  for (size_t s = 0; s < scales.size(); ++s) {
    if (row < bases[s + 1]) {
      const i64 off = row - bases[s];
      const i64 hw = scales[s].h * scales[s].w;
      rc.scale = static_cast<i64>(s);
      rc.t = off / hw;
      rc.y = (off % hw) / scales[s].w;
      rc.x = off % scales[s].w;
      return rc;
    }
  }
  fail("decode_row: row out of range");
}

LayoutSpec layout_ss2d(const std::vector<ScaleShape>& scales, i64 T,
                       bool audio) {
  check_geometry(scales, T);
  const std::vector<i64> bases = scale_bases(scales, T);
  LayoutSpec spec;
  spec.visual_rows = bases.back();
  spec.audio_rows = audio ? T : 0;
  const i64 m = layout_m(scales);
  spec.seg_len = m + (audio ? 1 : 0);

  auto frame_order = [&](i64 t, bool wh) {
    std::vector<i64> order;
    order.reserve(static_cast<size_t>(m));
    for (size_t s = 0; s < scales.size(); ++s) {
      const i64 h = scales[s].h, w = scales[s].w;
      if (!wh) {
        for (i64 y = 0; y < h; ++y) {
          for (i64 x = 0; x < w; ++x) {
            order.push_back(bases[s] + (t * h + y) * w + x);
          }
        }
      } else {
        for (i64 x = 0; x < w; ++x) {
          for (i64 y = 0; y < h; ++y) {
            order.push_back(bases[s] + (t * h + y) * w + x);
          }
        }
      }
    }
    return order;
  };

  const Direction dirs[4] = {Direction::HWp, Direction::WHp, Direction::HWm,
                             Direction::WHm};
  for (int k = 0; k < 4; ++k) {
    SeqSpec s;
    s.dir = dirs[k];
    s.perm.reserve(static_cast<size_t>(T * spec.seg_len));
    const bool wh = (k % 2 == 1);
    const bool rev = (k >= 2);
    for (i64 t = 0; t < T; ++t) {
      std::vector<i64> order = frame_order(t, wh);
      if (rev) std::reverse(order.begin(), order.end());
      s.perm.insert(s.perm.end(), order.begin(), order.end());
      if (audio) s.perm.push_back(spec.visual_rows + t);
    }
    spec.seqs.push_back(std::move(s));
  }
  finish(spec);
  return spec;
}

LayoutSpec layout_3d(const std::vector<ScaleShape>& scales, i64 T,
                     int direction_count) {
  check_geometry(scales, T);
  check(direction_count == 2 || direction_count == 4 ||
            direction_count == 6 || direction_count == 8 ||
            direction_count == 10 || direction_count == 12,
        "layout_3d: direction_count must be one of {2,4,6,8,10,12}");
  const std::vector<i64> bases = scale_bases(scales, T);
  LayoutSpec spec;
  spec.visual_rows = bases.back();
  spec.audio_rows = 0;
  spec.seg_len = 0;

  // Axis orders: outer, middle, inner loop variables over (t,y,x).
  struct Order {
    Direction plus, minus;
    char axes[3];
  };
  const Order orders[6] = {
      {Direction::THWp, Direction::THWm, {'t', 'y', 'x'}},
      {Direction::TWHp, Direction::TWHm, {'t', 'x', 'y'}},
      {Direction::HWTp, Direction::HWTm, {'y', 'x', 't'}},
      {Direction::WHTp, Direction::WHTm, {'x', 'y', 't'}},
      {Direction::HTWp, Direction::HTWm, {'y', 't', 'x'}},
      {Direction::WTHp, Direction::WTHm, {'x', 't', 'y'}},
  };

  for (int o = 0; o < direction_count / 2; ++o) {
    std::vector<i64> fwd;
    fwd.reserve(static_cast<size_t>(spec.visual_rows));
    for (size_t s = 0; s < scales.size(); ++s) {
      const i64 h = scales[s].h, w = scales[s].w;
      auto extent = [&](char a) { return a == 't' ? T : (a == 'y' ? h : w); };
      const char* ax = orders[o].axes;
      i64 idx[3];
      for (idx[0] = 0; idx[0] < extent(ax[0]); ++idx[0]) {
        for (idx[1] = 0; idx[1] < extent(ax[1]); ++idx[1]) {
          for (idx[2] = 0; idx[2] < extent(ax[2]); ++idx[2]) {
            i64 t = 0, y = 0, x = 0;
            for (int a = 0; a < 3; ++a) {
              if (ax[a] == 't') t = idx[a];
              if (ax[a] == 'y') y = idx[a];
              if (ax[a] == 'x') x = idx[a];
            }
            fwd.push_back(bases[s] + (t * h + y) * w + x);
          }
        }
      }
    }
    SeqSpec plus;
    plus.dir = orders[o].plus;
    plus.perm = fwd;
    spec.seqs.push_back(std::move(plus));
    SeqSpec minus;
    minus.dir = orders[o].minus;
    minus.perm.assign(fwd.rbegin(), fwd.rend());
    spec.seqs.push_back(std::move(minus));
  }
  finish(spec);
  return spec;
}

LayoutSpec layout_temporal_audio(ScaleShape scale, i64 T, bool prepend) {
  check_geometry({scale}, T);
  const i64 h = scale.h, w = scale.w;
  LayoutSpec spec;
  spec.visual_rows = T * h * w;
  spec.audio_rows = T;
  spec.seg_len = 0;

  std::vector<i64> thw(static_cast<size_t>(spec.visual_rows));
  for (i64 r = 0; r < spec.visual_rows; ++r) thw[static_cast<size_t>(r)] = r;
  std::vector<i64> twh;
  twh.reserve(static_cast<size_t>(spec.visual_rows));
  for (i64 t = 0; t < T; ++t) {
    for (i64 x = 0; x < w; ++x) {
      for (i64 y = 0; y < h; ++y) twh.push_back((t * h + y) * w + x);
    }
  }

  auto audio_rows_asc = [&] {
    std::vector<i64> a(static_cast<size_t>(T));
    for (i64 t = 0; t < T; ++t) {
      a[static_cast<size_t>(t)] = spec.visual_rows + t;
    }
    return a;
  };

  const std::vector<i64> asc = audio_rows_asc();
  std::vector<i64> desc(asc.rbegin(), asc.rend());

  auto join = [](const std::vector<i64>& a, const std::vector<i64>& b) {
    std::vector<i64> out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
  };

  std::vector<i64> thw_rev(thw.rbegin(), thw.rend());
  std::vector<i64> twh_rev(twh.rbegin(), twh.rend());

  SeqSpec s1, s2, s3, s4;
  s1.dir = Direction::THWp;
  s2.dir = Direction::TWHp;
  s3.dir = Direction::THWm;
  s4.dir = Direction::TWHm;
  if (!prepend) {
    s1.perm = join(thw, asc);
    s2.perm = join(twh, asc);
    s3.perm.assign(s1.perm.rbegin(), s1.perm.rend());
    s4.perm.assign(s2.perm.rbegin(), s2.perm.rend());
  } else {
    s1.perm = join(asc, thw);
    s2.perm = join(asc, twh);
    s3.perm = join(desc, thw_rev);
    s4.perm = join(desc, twh_rev);
  }
  spec.seqs = {std::move(s1), std::move(s2), std::move(s3), std::move(s4)};
  finish(spec);
  return spec;
}

}  // namespace ssmavs
