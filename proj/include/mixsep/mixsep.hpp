#pragma once

#include "mixsep/error.hpp"
#include "mixsep/numerics.hpp"
#include "mixsep/hungarian.hpp"
#include "mixsep/vmf.hpp"
#include "mixsep/cacg.hpp"
#include "mixsep/integrated.hpp"
#include "mixsep/frontend.hpp"
#include "mixsep/rttm.hpp"
#include "mixsep/metrics.hpp"
#include "mixsep/synth.hpp"
#include "mixsep/pipeline.hpp"
#include "mixsep/config.hpp"
