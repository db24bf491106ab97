"""Main FastAPI application for the IPA ASR toolkit."""

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app import __version__
from app.api.routes import router
from app.utils.config import get_settings
from app.utils.errors import ToolkitError, app_exception_handler, general_exception_handler
from app.utils.logger import setup_logging

# Initialize logging
setup_logging()

# Get application settings
settings = get_settings()

# Create FastAPI app
app = FastAPI(
    title=settings.app_name,
    description="""
    ## IPA ASR Toolkit

    Interactive access to the toolkit's pure operations.

    ### API Endpoints:
    * `/segment` - Split IPA text into inventory phonemes
    * `/error-rate` - Word, character or phoneme error rate
    * `/transliterate` - Cyrillic to IPA and back
    * `/phoneme-scores` - Precision, recall and F1 from edit counters
    * `/health` - Service health and loaded inventory size
    """,
    version=__version__,
    license_info={
        "name": "MIT",
    },
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

# Add exception handlers
app.add_exception_handler(ToolkitError, app_exception_handler)
app.add_exception_handler(Exception, general_exception_handler)

# Include API routes
app.include_router(router)


if __name__ == "__main__":
    import uvicorn

    uvicorn.run(app, host=settings.host, port=settings.port)
