#pragma once

#include <iosfwd>

#include "carel/gridworld/world.hpp"

namespace carel::grid {

// One JSON object per line and per step:
//   {"step":0,"obs":[[kind,color,state],...],"action":"forward","reward":0.0,"done":false}
void write_trace(std::ostream& os, const Episode& episode);

}  // namespace carel::grid
