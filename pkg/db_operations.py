from sqlalchemy import (
    create_engine, Column, Integer, String, ForeignKey,
    DateTime, Float, UniqueConstraint
)
from sqlalchemy.orm import sessionmaker, relationship, declarative_base
from sqlalchemy.pool import StaticPool
from dotenv import load_dotenv
import os
import logging
from datetime import datetime, timezone
from contextlib import contextmanager

from config import APP_VERSION
from errors import DataError, MissingCalibrationError

logger = logging.getLogger(__name__)

load_dotenv()

Base = declarative_base()

DEFAULT_DB_URL = 'sqlite:///qstructure.db'


class CalibrationRecord(Base):
    __tablename__ = 'calibrations'

    id = Column(Integer, primary_key=True)
    statistic = Column(String(16), nullable=False)
    null_spec = Column(String(64), unique=True, nullable=False)
    null_model = Column(String(8), nullable=False)
    noise_sigma = Column(Float, nullable=False)
    reps = Column(Integer, nullable=False)
    seed = Column(Integer, nullable=False)
    mean = Column(Float, nullable=False)
    std = Column(Float, nullable=False)
    tail = Column(String(16), nullable=False, default='upper')
    app_version = Column(String(20), nullable=False, default=APP_VERSION)
    creation_date = Column(DateTime, nullable=False, default=lambda: datetime.now(timezone.utc))

    quantiles = relationship("CalibrationQuantile", back_populates="calibration",
                             cascade="all, delete-orphan", order_by="CalibrationQuantile.level")

    def __repr__(self):
        return (f"<CalibrationRecord(id={self.id}, statistic='{self.statistic}', "
                f"null_model='{self.null_model}', noise={self.noise_sigma})>")


class CalibrationQuantile(Base):
    __tablename__ = 'calibration_quantiles'

    id = Column(Integer, primary_key=True)
    calibration_id = Column(Integer, ForeignKey('calibrations.id'), nullable=False)
    level = Column(Float, nullable=False)
    threshold = Column(Float, nullable=False)

    calibration = relationship("CalibrationRecord", back_populates="quantiles")

    __table_args__ = (
        UniqueConstraint('calibration_id', 'level', name='uq_calibration_level'),
    )

    def __repr__(self):
        return f"<CalibrationQuantile(level={self.level}, threshold={self.threshold})>"


class AnalysisChunk(Base):
    __tablename__ = 'analysis_chunks'

    id = Column(Integer, primary_key=True)
    run_hash = Column(String(64), nullable=False)
    chunk_index = Column(Integer, nullable=False)
    path = Column(String(500), nullable=False)
    voxel_count = Column(Integer, nullable=False)
    completion_date = Column(DateTime, nullable=False, default=lambda: datetime.now(timezone.utc))

    __table_args__ = (
        UniqueConstraint('run_hash', 'chunk_index', name='uq_run_chunk'),
    )

    def __repr__(self):
        return f"<AnalysisChunk(run='{self.run_hash[:12]}', index={self.chunk_index}, voxels={self.voxel_count})>"


class DatabaseManager:
    def __init__(self, db_url=None):
        self.db_url = db_url or os.getenv('QSTRUCT_DB_URL', DEFAULT_DB_URL)
        if self.db_url in ('sqlite://', 'sqlite:///:memory:'):
            # in-memory sqlite: every session shares one connection
            self.engine = create_engine(self.db_url, echo=False, poolclass=StaticPool,
                                        connect_args={'check_same_thread': False})
        else:
            self.engine = create_engine(self.db_url, echo=False)
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)

    @contextmanager
    def get_session(self):
        session = self.SessionLocal()
        try:
            yield session
            session.commit()
        except Exception as e:
            session.rollback()
            logger.error(f"Database session error: {e}")
            raise
        finally:
            session.close()

    def init_database(self, drop_tables=False):
        """
        Initialize the database by creating all tables.
        If drop_tables=True, existing tables will be dropped first.
        """
        try:
            if drop_tables:
                Base.metadata.drop_all(self.engine)
                logger.info("Existing tables dropped successfully")

            Base.metadata.create_all(self.engine)
            logger.debug("Database tables ready")

        except Exception as e:
            logger.error(f"Error initializing database: {e}")
            raise


def _manager(db):
    if db is None:
        db = DatabaseManager()
        db.init_database()
    return db


def save_calibration(calibration, db=None):
    """Store a NullCalibration, replacing any earlier one with the same null spec"""
    db = _manager(db)

    with db.get_session() as session:
        existing = session.query(CalibrationRecord).filter_by(null_spec=calibration.null_spec).first()
        if existing:
            logger.info(f"Replacing calibration {calibration.statistic} ({calibration.null_spec[:12]})")
            session.delete(existing)
            session.flush()

        record = CalibrationRecord(
            statistic=calibration.statistic,
            null_spec=calibration.null_spec,
            null_model=calibration.null_model,
            noise_sigma=float(calibration.noise_sigma),
            reps=calibration.reps,
            seed=calibration.seed,
            mean=float(calibration.mean),
            std=float(calibration.std),
            tail=calibration.tail,
        )
        record.quantiles = [CalibrationQuantile(level=float(lv), threshold=float(th))
                            for lv, th in zip(calibration.levels, calibration.thresholds)]
        session.add(record)
        session.flush()

        logger.info(f"Calibration saved: {calibration.statistic} under {calibration.null_model} "
                    f"at noise {calibration.noise_sigma:g}")
        return record.id


def _to_calibration(record):
    from stats import NullCalibration

    if not record.quantiles:
        raise DataError(f"Calibration {record.id} has no quantiles")
    return NullCalibration(
        statistic=record.statistic,
        null_model=record.null_model,
        null_spec=record.null_spec,
        noise_sigma=record.noise_sigma,
        reps=record.reps,
        seed=record.seed,
        levels=[q.level for q in record.quantiles],
        thresholds=[q.threshold for q in record.quantiles],
        mean=record.mean,
        std=record.std,
        tail=record.tail,
    )


def load_calibration(statistic, null_spec, noise_sigma=None, db=None):
    """Return the stored NullCalibration for a statistic and null spec hash"""
    db = _manager(db)

    with db.get_session() as session:
        record = session.query(CalibrationRecord).filter_by(statistic=statistic, null_spec=null_spec).first()
        if not record:
            raise MissingCalibrationError(statistic, null_spec, noise_sigma)
        return _to_calibration(record)


def list_calibrations(db=None):
    """Summaries of every stored calibration, ordered by statistic and noise level"""
    db = _manager(db)

    with db.get_session() as session:
        records = session.query(CalibrationRecord).order_by(
            CalibrationRecord.statistic, CalibrationRecord.noise_sigma).all()
        return [{
            'id': r.id,
            'statistic': r.statistic,
            'null_model': r.null_model,
            'noise_sigma': r.noise_sigma,
            'reps': r.reps,
            'seed': r.seed,
            'null_spec': r.null_spec,
            'app_version': r.app_version,
        } for r in records]


def mark_chunk_done(run_hash, chunk_index, path, voxel_count, db=None):
    db = _manager(db)

    with db.get_session() as session:
        chunk = session.query(AnalysisChunk).filter_by(run_hash=run_hash, chunk_index=chunk_index).first()
        if chunk:
            chunk.path = str(path)
            chunk.voxel_count = voxel_count
        else:
            session.add(AnalysisChunk(run_hash=run_hash, chunk_index=chunk_index,
                                      path=str(path), voxel_count=voxel_count))
        logger.debug(f"Chunk {chunk_index} of run {run_hash[:12]} done ({voxel_count} voxels)")


def completed_chunks(run_hash, db=None):
    """Map chunk index -> stored result path for a volume analysis run"""
    db = _manager(db)

    with db.get_session() as session:
        chunks = session.query(AnalysisChunk).filter_by(run_hash=run_hash).all()
        return {c.chunk_index: c.path for c in chunks}
