"""API routes for the IPA ASR toolkit."""

from functools import lru_cache
from typing import Optional

from fastapi import APIRouter, Depends, HTTPException, status

from app import __version__
from app.models.schemas import (
    ErrorRateRequest,
    ErrorRateResponse,
    HealthResponse,
    PhonemeCounts,
    PhonemeInventory,
    PhonemeScoreRequest,
    PhonemeScoreResponse,
    SegmentRequest,
    SegmentResponse,
    TransliterateRequest,
    TransliterateResponse,
    TransliterationTable,
)
from app.services.ipa_service import load_inventory, load_transliteration_table, segment, transliterate
from app.services.metrics_service import error_rate, score_counts
from app.utils.config import get_settings

router = APIRouter()


@lru_cache()
def _load_inventory(path: str) -> PhonemeInventory:
    return load_inventory(path)


@lru_cache()
def _load_table(path: str) -> TransliterationTable:
    return load_transliteration_table(path)


def optional_inventory() -> Optional[PhonemeInventory]:
    """Inventory configured through IPA_ASR_INVENTORY, if any."""
    path = get_settings().inventory_path
    return _load_inventory(path) if path else None


def require_inventory(inv: Optional[PhonemeInventory] = Depends(optional_inventory)) -> PhonemeInventory:
    if inv is None:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail="No phoneme inventory configured")
    return inv


def require_table() -> TransliterationTable:
    path = get_settings().translit_path
    if not path:
        raise HTTPException(status_code=status.HTTP_404_NOT_FOUND, detail="No transliteration table configured")
    return _load_table(path)


# Root endpoint
@router.get("/", tags=["System"])
async def root():
    """Root endpoint providing basic service information."""
    return {
        "message": "IPA ASR Toolkit",
        "version": __version__,
        "status": "operational",
        "endpoints": {
            "segment": "/segment",
            "error_rate": "/error-rate",
            "transliterate": "/transliterate",
            "phoneme_scores": "/phoneme-scores",
            "health": "/health",
            "docs": "/docs",
        },
    }


@router.get("/health", response_model=HealthResponse, tags=["System"])
async def health(inv: Optional[PhonemeInventory] = Depends(optional_inventory)):
    return HealthResponse(status="healthy", version=__version__, inventory_size=len(inv) if inv is not None else None)


@router.post("/segment", response_model=SegmentResponse, tags=["IPA"])
async def segment_text(request: SegmentRequest, inv: PhonemeInventory = Depends(require_inventory)):
    """Segment IPA text into inventory indices (word separators included)."""
    indices = segment(request.text, inv)
    return SegmentResponse(indices=indices, surfaces=[inv.surfaces[i] for i in indices])


@router.post("/error-rate", response_model=ErrorRateResponse, tags=["Metrics"])
async def compute_error_rate(request: ErrorRateRequest, inv: Optional[PhonemeInventory] = Depends(optional_inventory)):
    """Word, character or phoneme error rate of one hypothesis against its reference."""
    return ErrorRateResponse(level=request.level, rate=error_rate(request.level, request.ref, request.hyp, inv))


@router.post("/transliterate", response_model=TransliterateResponse, tags=["IPA"])
async def transliterate_text(request: TransliterateRequest, table: TransliterationTable = Depends(require_table)):
    return TransliterateResponse(text=transliterate(request.text, table, request.direction, strict=request.strict))


@router.post("/phoneme-scores", response_model=PhonemeScoreResponse, tags=["Metrics"])
async def phoneme_scores(request: PhonemeScoreRequest):
    """Precision, recall and F1 from N/S/I/D counters."""
    precision, recall, f1 = score_counts(PhonemeCounts(N=request.n, S=request.s, I=request.i, D=request.d))
    return PhonemeScoreResponse(precision=precision, recall=recall, f1=f1)
