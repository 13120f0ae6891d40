#pragma once

// Umbrella header: the full one-port SAW resonator toolkit.

#include "sawkit/errors.hpp"
#include "sawkit/random.hpp"
#include "sawkit/domain.hpp"
#include "sawkit/fit_engine.hpp"
#include "sawkit/com_sim.hpp"
#include "sawkit/resonance_extract.hpp"
#include "sawkit/loss_models.hpp"
#include "sawkit/io.hpp"
