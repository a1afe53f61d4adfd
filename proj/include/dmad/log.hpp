#pragma once

namespace dmad {

// Routes spdlog to stderr at the level named by DMAD_LOG (error, info or
// debug; default info).
void init_logging();

}  // namespace dmad
