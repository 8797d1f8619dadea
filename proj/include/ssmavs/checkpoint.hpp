#pragma once

#include <string>

#include "ssmavs/tape.hpp"

namespace ssmavs {

// Parameter checkpoint directory: a UTF-8 "manifest.txt" with one
// "name<TAB>relative-path" line per parameter (sorted by name) plus one
// .nst tensor file per parameter. Loading requires an exact match between
// the manifest and the store: same names, shapes, and dtypes.
void save_checkpoint(const ParamStore& ps, const std::string& dir);
void load_checkpoint(ParamStore& ps, const std::string& dir);

}  // namespace ssmavs
