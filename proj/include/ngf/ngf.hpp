#pragma once

#include "ngf/analytic.hpp"
#include "ngf/errors.hpp"
#include "ngf/evalkit.hpp"
#include "ngf/field.hpp"
#include "ngf/geometry.hpp"
#include "ngf/io.hpp"
#include "ngf/losses.hpp"
#include "ngf/sampling.hpp"
#include "ngf/surfacing.hpp"
#include "ngf/tape.hpp"
#include "ngf/trainer.hpp"
