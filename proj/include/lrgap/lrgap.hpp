#pragma once

#include "errors.hpp"
#include "expm.hpp"
#include "grid.hpp"
#include "integrators.hpp"
#include "lowrank_state.hpp"
#include "propagators.hpp"
#include "rte_model.hpp"
#include "spectral.hpp"
#include "state.hpp"
#include "types.hpp"
#include "weighted_linalg.hpp"
