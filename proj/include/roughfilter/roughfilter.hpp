#pragma once

// Umbrella header. scenario.hpp pulls in hash.hpp, which needs OpenSSL::Crypto at link time.
#include "backward.hpp"
#include "classical.hpp"
#include "coefficients.hpp"
#include "controlled.hpp"
#include "degenerate.hpp"
#include "errors.hpp"
#include "filter.hpp"
#include "io.hpp"
#include "models.hpp"
#include "operators.hpp"
#include "random.hpp"
#include "reduce.hpp"
#include "residuals.hpp"
#include "roughpath.hpp"
#include "rsde.hpp"
#include "scenario.hpp"
#include "test_functions.hpp"
#include "tolerances.hpp"
