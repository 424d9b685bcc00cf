#pragma once

#include "hermflow/torus_field.hpp"
#include "hermflow/exterior_oracle.hpp"
#include "hermflow/hermitian_forms.hpp"
#include "hermflow/chern_operator.hpp"
#include "hermflow/linearized_ops.hpp"
#include "hermflow/norms.hpp"
#include "hermflow/flow_engine.hpp"
#include "hermflow/diagnostics.hpp"
#include "hermflow/rng.hpp"
#include "hermflow/scenario.hpp"
