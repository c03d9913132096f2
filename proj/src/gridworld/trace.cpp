#include "carel/gridworld/trace.hpp"

#include <json.hpp>
#include <ostream>

namespace carel::grid {

void write_trace(std::ostream& os, const Episode& episode) {
  for (std::size_t i = 0; i < episode.steps.size(); ++i) {
    const EpisodeStep& s = episode.steps[i];
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& e : s.observation.cells) cells.push_back({e.kind, e.color, e.state});
    nlohmann::json rec = {{"step", i},
                          {"obs", std::move(cells)},
                          {"action", std::string(to_string(s.action))},
                          {"reward", s.reward},
                          {"done", s.done}};
    os << rec.dump() << '\n';
  }
}

}  // namespace carel::grid
