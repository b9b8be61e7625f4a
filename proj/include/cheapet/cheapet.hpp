#pragma once

// Umbrella header; each component can also be included on its own.

#include "cheapet/config.hpp"
#include "cheapet/cost_ledger.hpp"
#include "cheapet/errors.hpp"
#include "cheapet/evaluation.hpp"
#include "cheapet/gateway.hpp"
#include "cheapet/local_model.hpp"
#include "cheapet/remote_client.hpp"
#include "cheapet/routing.hpp"
#include "cheapet/stub_remote.hpp"
#include "cheapet/supervision.hpp"
#include "cheapet/trace.hpp"
