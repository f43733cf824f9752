#include "evasim/episode.hpp"

#include "evasim/error.hpp"

namespace evasim {

std::string to_string(Termination t) {
  switch (t) {
    case Termination::Collision:
      return "collision";
    case Termination::Goal:
      return "goal";
    case Termination::Timeout:
      return "timeout";
  }
  return "timeout";
}

Termination termination_from_string(const std::string& s) {
  if (s == "collision") return Termination::Collision;
  if (s == "goal") return Termination::Goal;
  if (s == "timeout") return Termination::Timeout;
  throw InputError("unknown termination cause '" + s + "'");
}

}  // namespace evasim
