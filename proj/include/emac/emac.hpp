#pragma once

#include "emac/agent.hpp"
#include "emac/diagnostics.hpp"
#include "emac/environments.hpp"
#include "emac/episodic_memory.hpp"
#include "emac/harness.hpp"
#include "emac/platform.hpp"
#include "emac/replay.hpp"
#include "emac/rng.hpp"
#include "emac/tensor_nn.hpp"
