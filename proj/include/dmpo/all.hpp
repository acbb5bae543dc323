#pragma once

// Umbrella header for the whole library.

#include "dmpo/bench.hpp"
#include "dmpo/checkpoint.hpp"
#include "dmpo/config.hpp"
#include "dmpo/dmpo.hpp"
#include "dmpo/e2e.hpp"
#include "dmpo/env.hpp"
#include "dmpo/halton.hpp"
#include "dmpo/math_util.hpp"
#include "dmpo/mppi.hpp"
#include "dmpo/net.hpp"
#include "dmpo/parallel.hpp"
#include "dmpo/ppo.hpp"
#include "dmpo/report.hpp"
#include "dmpo/rng.hpp"
#include "dmpo/runner.hpp"
#include "dmpo/sim.hpp"
#include "dmpo/task.hpp"
#include "dmpo/trainer.hpp"
