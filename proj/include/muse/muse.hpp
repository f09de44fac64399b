#pragma once

#include "muse/coreset.hpp"
#include "muse/cost.hpp"
#include "muse/error.hpp"
#include "muse/eval.hpp"
#include "muse/ltc.hpp"
#include "muse/parallel.hpp"
#include "muse/rng.hpp"
#include "muse/stats.hpp"
#include "muse/trainer.hpp"
#include "muse/trajectory.hpp"
