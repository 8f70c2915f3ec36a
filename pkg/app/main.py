import asyncio
import logging
from typing import Any, Dict, List

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware

from .constants import EXPERIMENT_KINDS
from .exceptions import PreflightError
from .logging_config import setup_logging
from .models import CorpusRequest, ExperimentConfig, InvariantResult, Report
from .services import corpus_summary, generate_corpus, run_experiment, verify_invariants

# Setup structured logging
setup_logging()
logger = logging.getLogger(__name__)

app = FastAPI(
    title="lp-lab API",
    description="Runs numerical checks of multi-parameter Littlewood-Paley, sparse and weighted estimates.",
    version="1.0.0"
)

# --- CORS Middleware ---
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# --- API Endpoints ---
@app.get("/")
async def root():
    """Root endpoint to check API health."""
    return {"message": "lp-lab API is running.", "experiments": list(EXPERIMENT_KINDS)}

@app.get("/invariants/", response_model=List[InvariantResult])
async def invariants():
    """Runs every preflight invariant suite."""
    logger.info("Running invariant suites via /invariants")
    try:
        return await asyncio.to_thread(verify_invariants)
    except Exception as e:
        logger.error(f"Error running invariant suites: {e}", exc_info=True)
        raise HTTPException(status_code=500, detail="Could not run the invariant suites.")

@app.post("/experiments/{kind}", response_model=Report)
async def experiment(kind: str, config: ExperimentConfig):
    """
    Runs one experiment and returns its report.
    """
    logger.info(f"Experiment request: kind={kind}, grid={config.grid.levels}, seed={config.seed}")
    try:
        return await run_experiment(kind, config)
    except PreflightError as pe:
        logger.error(f"Preflight failed for '{kind}': {pe}")
        raise HTTPException(status_code=500, detail=str(pe))
    except ValueError as ve:
        logger.warning(f"Value error during experiment: {ve}")
        raise HTTPException(status_code=400, detail=str(ve))
    except Exception as e:
        logger.error(f"Unexpected error during experiment: {e}", exc_info=True)
        raise HTTPException(status_code=500, detail=f"An unexpected error occurred: {str(e)}")

@app.post("/corpus/")
async def corpus(request: CorpusRequest) -> List[Dict[str, Any]]:
    """Per-fixture summary statistics of a seeded corpus."""
    try:
        fixtures = await asyncio.to_thread(generate_corpus, request.recipe, request.seed, request.grid)
        return corpus_summary(fixtures)
    except ValueError as ve:
        logger.warning(f"Value error generating corpus: {ve}")
        raise HTTPException(status_code=400, detail=str(ve))


# Run using: uvicorn app.main:app --reload
