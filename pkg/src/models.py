from sqlalchemy import create_engine, Column, Integer, String, DateTime
from sqlalchemy.orm import declarative_base, sessionmaker

from src.settings import DATABASE

Base = declarative_base()
engine = create_engine(DATABASE)


class RunRecord(Base):
    __tablename__ = 'runs'
    id = Column(Integer, primary_key=True)

    scenario = Column(String)
    seed = Column(Integer)
    config_hash = Column(String(64), index=True)
    job_count = Column(Integer)
    passed = Column(Integer, default=0)
    killed = Column(Integer, default=0)
    unsuccessful = Column(Integer, default=0)
    events = Column(Integer, default=0)
    out_dir = Column(String)
    created = Column(DateTime)

    def __repr__(self):
        return f"<RunRecord {self.id} {self.scenario} seed={self.seed} {self.config_hash[:12] if self.config_hash else ''}>"


Session = sessionmaker(bind=engine)
DBSession = Session()


def ensure_tables():
    Base.metadata.create_all(engine)
