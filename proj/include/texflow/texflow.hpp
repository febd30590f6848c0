// ============================================================================
// texflow.hpp - umbrella header
// ============================================================================

#pragma once

#include "texflow/common.hpp"
#include "texflow/dictionary.hpp"
#include "texflow/eval.hpp"
#include "texflow/features.hpp"
#include "texflow/flow.hpp"
#include "texflow/image.hpp"
#include "texflow/linalg.hpp"
#include "texflow/pipeline.hpp"
#include "texflow/scoring.hpp"
#include "texflow/selfcheck.hpp"
#include "texflow/texgen.hpp"
